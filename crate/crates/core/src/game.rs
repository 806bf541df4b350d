//! Controlled-SDE simulation and the two players' cost functionals.
//!
//! Dynamics follow the Euler-Maruyama scheme
//!
//! ```text
//! X_{m+1} = X_m + f(X_m, u0_m, u1_m) dt + sigma(X_m, u0_m, u1_m) dW_m
//! ```
//!
//! with costs `J_i = E[ sum_m L_i(X_m, u0_m, u1_m) dt + g_i(X_M) ]`
//! (left-endpoint quadrature, matching the predictable-integrand
//! convention). Coefficients are written against the autodiff tape, so
//! costs are differentiable with respect to control coefficients.
//!
//! Scenarios are processed in fixed-size chunks in a fixed order; repeated
//! evaluations are bit-identical.

use std::collections::BTreeMap;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Tape, Var};
use crate::brownian::BrownianEnsemble;
use crate::chaos::BasisElement;
use crate::error::{Error, Result};
use crate::process::{AdaptedProcess, CausalEvaluator};

const CHUNK: usize = 1024;
const EXPLOSION_GUARD: f64 = 1e8;

/// Vector coefficient `(x, u0, u1) -> R^d` built from tape primitives.
pub type VectorCoeff = Arc<dyn Fn(&mut Tape, &[Var], &[Var], &[Var]) -> Vec<Var> + Send + Sync>;
/// Matrix coefficient `(x, u0, u1) -> R^{d x d}` (row-major).
pub type MatrixCoeff = Arc<dyn Fn(&mut Tape, &[Var], &[Var], &[Var]) -> Vec<Var> + Send + Sync>;
/// Scalar running cost `(x, u0, u1) -> R_{>=0}`.
pub type RunningCost = Arc<dyn Fn(&mut Tape, &[Var], &[Var], &[Var]) -> Var + Send + Sync>;
/// Scalar terminal cost `x -> R_{>=0}`.
pub type TerminalCost = Arc<dyn Fn(&mut Tape, &[Var]) -> Var + Send + Sync>;

/// A two-player controlled diffusion game.
#[derive(Clone)]
pub struct GameSpec {
    pub state_dim: usize,
    pub leader_dim: usize,
    pub follower_dim: usize,
    pub drift: VectorCoeff,
    pub diffusion: MatrixCoeff,
    pub running_cost: [RunningCost; 2],
    pub terminal_cost: [TerminalCost; 2],
    pub x0: Vec<f64>,
    /// Declared joint Lipschitz constant of all coefficients.
    pub lipschitz_bound: f64,
    /// Strong-convexity modulus of the follower Hamiltonian in u1, when known.
    pub convexity_modulus: Option<f64>,
}

impl std::fmt::Debug for GameSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GameSpec")
            .field("state_dim", &self.state_dim)
            .field("leader_dim", &self.leader_dim)
            .field("follower_dim", &self.follower_dim)
            .field("x0", &self.x0)
            .field("lipschitz_bound", &self.lipschitz_bound)
            .field("convexity_modulus", &self.convexity_modulus)
            .finish()
    }
}

/// Simulated states at grid nodes, `P x (M+1) x d`.
#[derive(Debug, Clone)]
pub struct StatePath {
    pub values: Array3<f64>,
}

/// Control parameterized by basis coefficients, component-major:
/// component `c` of the control is `sum_i coeffs[c*n + i] * s_i`.
#[derive(Debug, Clone)]
pub struct CoeffControl {
    pub elements: Vec<BasisElement>,
    pub coeffs: Vec<f64>,
    pub dim: usize,
}

impl CoeffControl {
    pub fn new(elements: Vec<BasisElement>, coeffs: Vec<f64>, dim: usize) -> Result<Self> {
        if coeffs.len() != elements.len() * dim {
            return Err(Error::DimensionMismatch {
                context: "coefficient control",
                expected: elements.len() * dim,
                actual: coeffs.len(),
            });
        }
        Ok(Self {
            elements,
            coeffs,
            dim,
        })
    }

    /// Materialize as an adapted process (causal by construction).
    pub fn process(&self, ensemble: &BrownianEnsemble) -> Result<AdaptedProcess> {
        let eval = Arc::new(CoeffControlEvaluator {
            control: self.clone(),
        });
        AdaptedProcess::from_causal(eval, ensemble)
    }
}

struct CoeffControlEvaluator {
    control: CoeffControl,
}

impl CausalEvaluator for CoeffControlEvaluator {
    fn evaluate(&self, ensemble: &BrownianEnsemble) -> Result<Array3<f64>> {
        let cfg = ensemble.cfg();
        let n = self.control.elements.len();
        let mut values = Array3::zeros((ensemble.scenarios(), cfg.steps, self.control.dim));
        for (i, elem) in self.control.elements.iter().enumerate() {
            let profile = elem.time_profile(cfg)?;
            let chaos = elem.chaos_values(ensemble)?;
            for c in 0..self.control.dim {
                let beta = self.control.coeffs[c * n + i];
                if beta == 0.0 {
                    continue;
                }
                for (p, chi) in chaos.iter().enumerate() {
                    let scale = beta * chi;
                    for (m, psi) in profile.iter().enumerate() {
                        if *psi != 0.0 {
                            values[(p, m, c)] += scale * psi;
                        }
                    }
                }
            }
        }
        Ok(values)
    }

    fn value_dim(&self) -> usize {
        self.control.dim
    }
}

/// One side of the control pair in a differentiable cost evaluation.
pub enum ControlSide<'a> {
    /// Values taken as given; no gradient.
    Fixed(&'a AdaptedProcess),
    /// Basis-coefficient control; gradient with respect to `coeffs` when
    /// `trainable`.
    Basis {
        control: &'a CoeffControl,
        trainable: bool,
    },
}

impl ControlSide<'_> {
    fn dim(&self) -> usize {
        match self {
            ControlSide::Fixed(p) => p.value_dim(),
            ControlSide::Basis { control, .. } => control.dim,
        }
    }
}

/// Result of a cost evaluation.
#[derive(Debug, Clone)]
pub struct CostEval {
    /// Monte-Carlo estimate of the cost.
    pub value: f64,
    /// Per-scenario contributions (their mean is `value`).
    pub scenario_values: Vec<f64>,
    /// Gradient with respect to the leader coefficients, if requested.
    pub grad_u0: Option<Vec<f64>>,
    /// Gradient with respect to the follower coefficients, if requested.
    pub grad_u1: Option<Vec<f64>>,
}

struct PreparedBasis {
    profiles: Vec<Vec<f64>>,
    chaos_chunks: Vec<Vec<Rc<Vec<f64>>>>, // [chunk][element]
}

fn prepare_basis(
    control: &CoeffControl,
    ensemble: &BrownianEnsemble,
    chunks: &[(usize, usize)],
) -> Result<PreparedBasis> {
    let cfg = ensemble.cfg();
    let mut profiles = Vec::with_capacity(control.elements.len());
    let mut full_chaos = Vec::with_capacity(control.elements.len());
    for e in &control.elements {
        profiles.push(e.time_profile(cfg)?);
        full_chaos.push(e.chaos_values(ensemble)?);
    }
    let chaos_chunks = chunks
        .iter()
        .map(|(start, end)| {
            full_chaos
                .iter()
                .map(|chi| Rc::new(chi[*start..*end].to_vec()))
                .collect()
        })
        .collect();
    Ok(PreparedBasis {
        profiles,
        chaos_chunks,
    })
}

fn chunk_ranges(total: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < total {
        let end = (start + CHUNK).min(total);
        out.push((start, end));
        start = end;
    }
    out
}

/// Control values for one chunk at one step, as tape variables per component.
enum SideState<'a> {
    Fixed(&'a AdaptedProcess),
    Basis {
        control: &'a CoeffControl,
        prepared: PreparedBasis,
        params: Vec<Var>,
    },
}

impl SideState<'_> {
    fn step_vars(
        &self,
        tape: &mut Tape,
        chunk_idx: usize,
        range: (usize, usize),
        m: usize,
    ) -> Vec<Var> {
        match self {
            SideState::Fixed(p) => {
                let dim = p.value_dim();
                (0..dim)
                    .map(|c| {
                        let col: Vec<f64> =
                            (range.0..range.1).map(|sc| p.values()[(sc, m, c)]).collect();
                        tape.constant(col)
                    })
                    .collect()
            }
            SideState::Basis {
                control,
                prepared,
                params,
                ..
            } => {
                let n = control.elements.len();
                let columns = &prepared.chaos_chunks[chunk_idx];
                (0..control.dim)
                    .map(|c| {
                        let weights: Vec<Var> = params[c * n..(c + 1) * n].to_vec();
                        let scales: Vec<f64> =
                            (0..n).map(|i| prepared.profiles[i][m]).collect();
                        tape.lincomb(&weights, &scales, columns)
                    })
                    .collect()
            }
        }
    }
}

fn make_side_state<'a>(
    side: &'a ControlSide<'a>,
    ensemble: &BrownianEnsemble,
    chunks: &[(usize, usize)],
) -> Result<SideState<'a>> {
    Ok(match side {
        ControlSide::Fixed(p) => {
            if p.ensemble_key() != ensemble.key() {
                return Err(Error::EnsembleMismatch);
            }
            SideState::Fixed(p)
        }
        ControlSide::Basis { control, .. } => SideState::Basis {
            control,
            prepared: prepare_basis(control, ensemble, chunks)?,
            params: Vec::new(),
        },
    })
}

/// Core chunked forward pass. Returns per-scenario total costs for the
/// requested player and, when a side is trainable, the coefficient
/// gradient of the Monte-Carlo mean. When `record_states` is set the full
/// state path is materialized.
fn run_game(
    spec: &GameSpec,
    player: Option<usize>,
    u0: &ControlSide,
    u1: &ControlSide,
    ensemble: &BrownianEnsemble,
    record_states: bool,
) -> Result<(Option<CostEval>, Option<StatePath>)> {
    if u0.dim() != spec.leader_dim {
        return Err(Error::DimensionMismatch {
            context: "leader control dimension",
            expected: spec.leader_dim,
            actual: u0.dim(),
        });
    }
    if u1.dim() != spec.follower_dim {
        return Err(Error::DimensionMismatch {
            context: "follower control dimension",
            expected: spec.follower_dim,
            actual: u1.dim(),
        });
    }
    let cfg = ensemble.cfg();
    let p_total = ensemble.scenarios();
    let dt = cfg.dt();
    let d = spec.state_dim;
    let chunks = chunk_ranges(p_total);

    let mut state_u0 = make_side_state(u0, ensemble, &chunks)?;
    let mut state_u1 = make_side_state(u1, ensemble, &chunks)?;

    let mut scenario_values = if player.is_some() {
        Vec::with_capacity(p_total)
    } else {
        Vec::new()
    };
    let mut grad_u0: Option<Vec<f64>> = match u0 {
        ControlSide::Basis {
            control,
            trainable: true,
        } => Some(vec![0.0; control.coeffs.len()]),
        _ => None,
    };
    let mut grad_u1: Option<Vec<f64>> = match u1 {
        ControlSide::Basis {
            control,
            trainable: true,
        } => Some(vec![0.0; control.coeffs.len()]),
        _ => None,
    };
    let mut states = if record_states {
        Some(Array3::zeros((p_total, cfg.steps + 1, d)))
    } else {
        None
    };
    let mut first_explosion: Option<(usize, usize, f64)> = None;

    for (chunk_idx, &(start, end)) in chunks.iter().enumerate() {
        let len = end - start;
        let mut tape = Tape::new();

        // register coefficient params fresh on this chunk's tape
        for side in [&mut state_u0, &mut state_u1] {
            if let SideState::Basis {
                control, params, ..
            } = side
            {
                *params = control.coeffs.iter().map(|b| tape.param(vec![*b])).collect();
            }
        }

        let mut x: Vec<Var> = spec
            .x0
            .iter()
            .map(|v| tape.constant(vec![*v; len]))
            .collect();
        if let Some(arr) = states.as_mut() {
            for (i, xi) in x.iter().enumerate() {
                let vals = tape.value(*xi);
                for (local, v) in vals.iter().enumerate() {
                    arr[(start + local, 0, i)] = *v;
                }
            }
        }
        let mut running: Option<Var> = None;

        for m in 0..cfg.steps {
            let u0_vars = state_u0.step_vars(&mut tape, chunk_idx, (start, end), m);
            let u1_vars = state_u1.step_vars(&mut tape, chunk_idx, (start, end), m);

            if let Some(pl) = player {
                let l = (spec.running_cost[pl])(&mut tape, &x, &u0_vars, &u1_vars);
                let l_dt = tape.scale(l, dt);
                running = Some(match running {
                    None => l_dt,
                    Some(acc) => tape.add(acc, l_dt),
                });
            }

            let drift = (spec.drift)(&mut tape, &x, &u0_vars, &u1_vars);
            let diffusion = (spec.diffusion)(&mut tape, &x, &u0_vars, &u1_vars);
            assert_eq!(drift.len(), d, "drift must return state_dim components");
            assert_eq!(diffusion.len(), d * d, "diffusion must return d*d entries");

            let dw: Vec<Var> = (0..cfg.brownian_dim)
                .map(|dim| {
                    let col: Vec<f64> = (start..end)
                        .map(|sc| ensemble.increment(sc, m, dim))
                        .collect();
                    tape.constant(col)
                })
                .collect();

            let mut next = Vec::with_capacity(d);
            for i in 0..d {
                let f_dt = tape.scale(drift[i], dt);
                let mut xi = tape.add(x[i], f_dt);
                for j in 0..d.min(cfg.brownian_dim) {
                    let noise = tape.mul(diffusion[i * d + j], dw[j]);
                    xi = tape.add(xi, noise);
                }
                next.push(xi);
            }
            x = next;

            for (i, xi) in x.iter().enumerate() {
                let vals = tape.value(*xi);
                for (local, v) in vals.iter().enumerate() {
                    if !v.is_finite() || v.abs() > EXPLOSION_GUARD {
                        let cand = (m + 1, start + local, *v);
                        let better = match first_explosion {
                            None => true,
                            Some((bm, bp, _)) => (cand.0, cand.1) < (bm, bp),
                        };
                        if better {
                            first_explosion = Some(cand);
                        }
                    }
                    if let Some(arr) = states.as_mut() {
                        arr[(start + local, m + 1, i)] = *v;
                    }
                }
            }
        }

        if let Some(pl) = player {
            let g = (spec.terminal_cost[pl])(&mut tape, &x);
            let total = match running {
                None => g,
                Some(acc) => tape.add(acc, g),
            };
            scenario_values.extend_from_slice(tape.value(total));

            if grad_u0.is_some() || grad_u1.is_some() {
                let chunk_sum = tape.sum(total);
                let root = tape.scale(chunk_sum, 1.0 / p_total as f64);
                let grads = tape.backward(root)?;
                if let (Some(acc), SideState::Basis { params, .. }) = (&mut grad_u0, &state_u0) {
                    for (dst, var) in acc.iter_mut().zip(params) {
                        *dst += grads.wrt(*var)[0];
                    }
                }
                if let (Some(acc), SideState::Basis { params, .. }) = (&mut grad_u1, &state_u1) {
                    for (dst, var) in acc.iter_mut().zip(params) {
                        *dst += grads.wrt(*var)[0];
                    }
                }
            }
        }
    }

    if let Some((step, scenario, value)) = first_explosion {
        return Err(Error::Explosion {
            scenario,
            step,
            value,
        });
    }

    let cost = player.map(|_| {
        let value = scenario_values.iter().sum::<f64>() / p_total as f64;
        CostEval {
            value,
            scenario_values,
            grad_u0,
            grad_u1,
        }
    });
    Ok((cost, states.map(|values| StatePath { values })))
}

/// Euler-Maruyama forward simulation of the state under fixed controls.
pub fn simulate(
    spec: &GameSpec,
    u0: &AdaptedProcess,
    u1: &AdaptedProcess,
    ensemble: &BrownianEnsemble,
) -> Result<StatePath> {
    let (_, path) = run_game(
        spec,
        None,
        &ControlSide::Fixed(u0),
        &ControlSide::Fixed(u1),
        ensemble,
        true,
    )?;
    Ok(path.expect("states recorded"))
}

/// Monte-Carlo estimate of `J_player(u0, u1)`.
pub fn cost(
    spec: &GameSpec,
    player: usize,
    u0: &AdaptedProcess,
    u1: &AdaptedProcess,
    ensemble: &BrownianEnsemble,
) -> Result<f64> {
    Ok(cost_eval(spec, player, &ControlSide::Fixed(u0), &ControlSide::Fixed(u1), ensemble)?.value)
}

/// Cost with per-scenario contributions and optional coefficient gradients.
pub fn cost_eval(
    spec: &GameSpec,
    player: usize,
    u0: &ControlSide,
    u1: &ControlSide,
    ensemble: &BrownianEnsemble,
) -> Result<CostEval> {
    assert!(player < 2, "player must be 0 or 1");
    let (cost, _) = run_game(spec, Some(player), u0, u1, ensemble, false)?;
    Ok(cost.expect("cost requested"))
}

/// Evaluate the drift at a single point (no randomness involved).
pub fn drift_at(spec: &GameSpec, x: &[f64], u0: &[f64], u1: &[f64]) -> Vec<f64> {
    eval_vector(&spec.drift, x, u0, u1)
}

/// Evaluate the diffusion matrix at a single point, row-major.
pub fn diffusion_at(spec: &GameSpec, x: &[f64], u0: &[f64], u1: &[f64]) -> Vec<f64> {
    eval_vector(&spec.diffusion, x, u0, u1)
}

/// Evaluate a running cost at a single point.
pub fn running_cost_at(spec: &GameSpec, player: usize, x: &[f64], u0: &[f64], u1: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let xv: Vec<Var> = x.iter().map(|v| tape.constant(vec![*v])).collect();
    let u0v: Vec<Var> = u0.iter().map(|v| tape.constant(vec![*v])).collect();
    let u1v: Vec<Var> = u1.iter().map(|v| tape.constant(vec![*v])).collect();
    let out = (spec.running_cost[player])(&mut tape, &xv, &u0v, &u1v);
    tape.value(out)[0]
}

/// Evaluate a terminal cost at a single point.
pub fn terminal_cost_at(spec: &GameSpec, player: usize, x: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let xv: Vec<Var> = x.iter().map(|v| tape.constant(vec![*v])).collect();
    let out = (spec.terminal_cost[player])(&mut tape, &xv);
    tape.value(out)[0]
}

fn eval_vector(coeff: &VectorCoeff, x: &[f64], u0: &[f64], u1: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv: Vec<Var> = x.iter().map(|v| tape.constant(vec![*v])).collect();
    let u0v: Vec<Var> = u0.iter().map(|v| tape.constant(vec![*v])).collect();
    let u1v: Vec<Var> = u1.iter().map(|v| tape.constant(vec![*v])).collect();
    let out = coeff(&mut tape, &xv, &u0v, &u1v);
    out.iter().map(|v| tape.value(*v)[0]).collect()
}

/// Spot-validation of the declared Lipschitz constant by sampled difference
/// quotients. A violation is reported, never raised as an error.
#[derive(Debug, Clone)]
pub struct LipschitzReport {
    pub declared: f64,
    pub observed: f64,
    pub within: bool,
}

pub fn validate_lipschitz(spec: &GameSpec, samples: usize, radius: f64, seed: u64) -> LipschitzReport {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let draw = |dim: usize, r: &mut ChaCha12Rng| -> Vec<f64> {
        (0..dim).map(|_| r.gen_range(-radius..radius)).collect()
    };
    let mut observed: f64 = 0.0;
    for _ in 0..samples {
        let x = draw(spec.state_dim, &mut rng);
        let u0 = draw(spec.leader_dim, &mut rng);
        let u1 = draw(spec.follower_dim, &mut rng);
        let x2 = draw(spec.state_dim, &mut rng);
        let u0b = draw(spec.leader_dim, &mut rng);
        let u1b = draw(spec.follower_dim, &mut rng);
        let dist = l2(&x, &x2) + l2(&u0, &u0b) + l2(&u1, &u1b);
        if dist < 1e-12 {
            continue;
        }
        let df = l2(&drift_at(spec, &x, &u0, &u1), &drift_at(spec, &x2, &u0b, &u1b));
        let ds = l2(
            &diffusion_at(spec, &x, &u0, &u1),
            &diffusion_at(spec, &x2, &u0b, &u1b),
        );
        let mut worst = df.max(ds) / dist;
        for pl in 0..2 {
            let dl = (running_cost_at(spec, pl, &x, &u0, &u1)
                - running_cost_at(spec, pl, &x2, &u0b, &u1b))
            .abs();
            let dg = (terminal_cost_at(spec, pl, &x) - terminal_cost_at(spec, pl, &x2)).abs();
            worst = worst.max(dl / dist).max(dg / dist);
        }
        observed = observed.max(worst);
    }
    LipschitzReport {
        declared: spec.lipschitz_bound,
        observed,
        within: observed <= spec.lipschitz_bound,
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

fn scalar_zero(tape: &mut Tape, like: Var) -> Var {
    let len = tape.value(like).len();
    tape.constant(vec![0.0; len])
}

/// Scalar strongly convex game: drift `u0 + u1`, constant diffusion,
/// follower cost `(u1 - u0)^2 + state_weight x^2` with terminal `x^2`.
/// The follower Hamiltonian has modulus `kappa = 2`.
pub fn convex_scalar_game(sigma: f64, state_weight: f64, x0: f64) -> GameSpec {
    GameSpec {
        state_dim: 1,
        leader_dim: 1,
        follower_dim: 1,
        drift: Arc::new(|t, _x, u0, u1| vec![t.add(u0[0], u1[0])]),
        diffusion: Arc::new(move |t, x, _u0, _u1| {
            let len = t.value(x[0]).len();
            vec![t.constant(vec![sigma; len])]
        }),
        running_cost: [
            Arc::new(|t, x, u0, u1| {
                // leader: |u0|^2 + |u1|^2 + small state anchor
                let a = t.mul(u0[0], u0[0]);
                let b = t.mul(u1[0], u1[0]);
                let ab = t.add(a, b);
                let xx = t.mul(x[0], x[0]);
                let xs = t.scale(xx, 0.1);
                t.add(ab, xs)
            }),
            Arc::new(move |t, x, u0, u1| {
                let diff = t.sub(u1[0], u0[0]);
                let sq = t.mul(diff, diff);
                let xx = t.mul(x[0], x[0]);
                let xs = t.scale(xx, state_weight);
                t.add(sq, xs)
            }),
        ],
        terminal_cost: [
            Arc::new(|t, x| scalar_zero(t, x[0])),
            Arc::new(|t, x| t.mul(x[0], x[0])),
        ],
        x0: vec![x0],
        lipschitz_bound: 8.0,
        convexity_modulus: Some(2.0),
    }
}

/// Degenerate-dynamics quadratic game with analytic follower response
/// `u1 = a0 + a1 u0` pointwise: `L1 = (u1 - a0 - a1 u0)^2`, `f = sigma = 0`.
pub fn quadratic_tracking_game(a0: f64, a1: f64) -> GameSpec {
    GameSpec {
        state_dim: 1,
        leader_dim: 1,
        follower_dim: 1,
        drift: Arc::new(|t, x, _u0, _u1| vec![scalar_zero(t, x[0])]),
        diffusion: Arc::new(|t, x, _u0, _u1| vec![scalar_zero(t, x[0])]),
        running_cost: [
            Arc::new(|t, _x, u0, u1| {
                let a = t.mul(u0[0], u0[0]);
                let b = t.mul(u1[0], u1[0]);
                t.add(a, b)
            }),
            Arc::new(move |t, _x, u0, u1| {
                let scaled = t.scale(u0[0], a1);
                let shifted = t.offset(scaled, a0);
                let diff = t.sub(u1[0], shifted);
                t.mul(diff, diff)
            }),
        ],
        terminal_cost: [
            Arc::new(|t, x| scalar_zero(t, x[0])),
            Arc::new(|t, x| scalar_zero(t, x[0])),
        ],
        x0: vec![0.0],
        lipschitz_bound: 6.0,
        convexity_modulus: Some(2.0),
    }
}

/// Decoupled quadratic game with closed-form equilibrium value 0:
/// `L0 = |u0|^2 + |u1|^2`, `L1 = |u1 - u0|^2`, no dynamics.
pub fn decoupled_quadratic_game() -> GameSpec {
    let mut spec = quadratic_tracking_game(0.0, 1.0);
    spec.convexity_modulus = Some(2.0);
    spec
}

/// Geometric Brownian motion `dX = mu X dt + eta X dW` with terminal cost
/// `x` for both players; controls are ignored. Used for scheme-order
/// studies.
pub fn gbm_game(mu: f64, eta: f64, x0: f64) -> GameSpec {
    GameSpec {
        state_dim: 1,
        leader_dim: 1,
        follower_dim: 1,
        drift: Arc::new(move |t, x, _u0, _u1| vec![t.scale(x[0], mu)]),
        diffusion: Arc::new(move |t, x, _u0, _u1| vec![t.scale(x[0], eta)]),
        running_cost: [
            Arc::new(|t, x, _u0, _u1| scalar_zero(t, x[0])),
            Arc::new(|t, x, _u0, _u1| scalar_zero(t, x[0])),
        ],
        terminal_cost: [Arc::new(|_t, x| x[0]), Arc::new(|_t, x| x[0])],
        x0: vec![x0],
        lipschitz_bound: (mu.abs() + eta.abs()).max(1.0),
        convexity_modulus: None,
    }
}

/// Parameters of the strongly convex assembled family
/// `f = C(u0)(A x + B u1) + D(u0)`,
/// `sigma = C_s(u0)(A_s x + B_s u1) + D_s(u0)`,
/// `L1 = C_L(u0) L1_core(x, u0, u1) + L1_leader(u0)`.
pub struct StronglyConvexParams {
    pub state_dim: usize,
    pub leader_dim: usize,
    pub follower_dim: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub a_sigma: Vec<f64>,
    pub b_sigma: Vec<f64>,
    /// Scalar Lipschitz factors of the leader control.
    pub c: Arc<dyn Fn(&mut Tape, &[Var]) -> Var + Send + Sync>,
    pub c_sigma: Arc<dyn Fn(&mut Tape, &[Var]) -> Var + Send + Sync>,
    pub c_l: Arc<dyn Fn(&mut Tape, &[Var]) -> Var + Send + Sync>,
    /// Infimum of `C_L` over the leader's control range (declared).
    pub c_l_inf: f64,
    pub d_shift: Arc<dyn Fn(&mut Tape, &[Var]) -> Vec<Var> + Send + Sync>,
    pub d_sigma_shift: Arc<dyn Fn(&mut Tape, &[Var]) -> Vec<Var> + Send + Sync>,
    /// Core follower running cost, strongly convex in u1 with the declared
    /// modulus.
    pub l1_core: RunningCost,
    pub l1_core_modulus: f64,
    pub l1_leader_term: Arc<dyn Fn(&mut Tape, &[Var]) -> Var + Send + Sync>,
    pub g1: TerminalCost,
    pub l0: RunningCost,
    pub g0: TerminalCost,
    pub x0: Vec<f64>,
    pub lipschitz_bound: f64,
}

/// Assemble a strongly convex game; the modulus is
/// `l1_core_modulus * inf C_L` and must be positive.
pub fn catalog_strongly_convex(params: StronglyConvexParams) -> Result<GameSpec> {
    let kappa = params.l1_core_modulus * params.c_l_inf;
    if !(kappa > 0.0) {
        return Err(Error::NonPositiveModulus(kappa));
    }
    let d = params.state_dim;
    let d1 = params.follower_dim;
    let a = Rc_free(params.a);
    let b = Rc_free(params.b);
    let a_sigma = Rc_free(params.a_sigma);
    let b_sigma = Rc_free(params.b_sigma);
    let (c, d_shift) = (params.c, params.d_shift);
    let (c_sigma, d_sigma_shift) = (params.c_sigma, params.d_sigma_shift);
    let (c_l, l1_core, l1_leader) = (params.c_l, params.l1_core, params.l1_leader_term);

    let drift: VectorCoeff = Arc::new(move |t, x, u0, u1| {
        let scale = c(t, u0);
        let shift = d_shift(t, u0);
        linear_family(t, &a, &b, x, u1, d, d1, scale, &shift)
    });
    let a_s = a_sigma;
    let b_s = b_sigma;
    let diffusion: MatrixCoeff = Arc::new(move |t, x, u0, u1| {
        let scale = c_sigma(t, u0);
        let shift = d_sigma_shift(t, u0);
        // diagonal matrix built from the linear family rows
        let rows = linear_family(t, &a_s, &b_s, x, u1, d, d1, scale, &shift);
        let mut out = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    out.push(rows[i]);
                } else {
                    out.push(scalar_zero(t, x[0]));
                }
            }
        }
        out
    });
    let running1: RunningCost = Arc::new(move |t, x, u0, u1| {
        let core = l1_core(t, x, u0, u1);
        let w = c_l(t, u0);
        let scaled = t.mul(core, w);
        let extra = l1_leader(t, u0);
        t.add(scaled, extra)
    });
    Ok(GameSpec {
        state_dim: d,
        leader_dim: params.leader_dim,
        follower_dim: d1,
        drift,
        diffusion,
        running_cost: [params.l0, running1],
        terminal_cost: [params.g0, params.g1],
        x0: params.x0,
        lipschitz_bound: params.lipschitz_bound,
        convexity_modulus: Some(kappa),
    })
}

#[allow(non_snake_case)]
fn Rc_free(v: Vec<f64>) -> Arc<Vec<f64>> {
    Arc::new(v)
}

#[allow(clippy::too_many_arguments)]
fn linear_family(
    t: &mut Tape,
    a: &Arc<Vec<f64>>,
    b: &Arc<Vec<f64>>,
    x: &[Var],
    u1: &[Var],
    d: usize,
    d1: usize,
    scale: Var,
    shift: &[Var],
) -> Vec<Var> {
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        let mut row = scalar_zero(t, x[0]);
        for (j, xj) in x.iter().enumerate().take(d) {
            let coeff = a[i * d + j];
            if coeff != 0.0 {
                let term = t.scale(*xj, coeff);
                row = t.add(row, term);
            }
        }
        for (j, uj) in u1.iter().enumerate().take(d1) {
            let coeff = b[i * d1 + j];
            if coeff != 0.0 {
                let term = t.scale(*uj, coeff);
                row = t.add(row, term);
            }
        }
        let scaled = t.mul_broadcast_or_mul(row, scale);
        out.push(t.add(scaled, shift[i]));
    }
    out
}

/// Named catalog lookup used by the command-line configuration.
pub fn by_name(name: &str, params: &BTreeMap<String, f64>) -> Result<GameSpec> {
    let get = |key: &str, default: f64| params.get(key).copied().unwrap_or(default);
    match name {
        "convex_scalar" => Ok(convex_scalar_game(
            get("sigma", 0.2),
            get("state_weight", 0.1),
            get("x0", 0.0),
        )),
        "quadratic_tracking" => Ok(quadratic_tracking_game(get("a0", 0.0), get("a1", 1.0))),
        "decoupled_quadratic" => Ok(decoupled_quadratic_game()),
        "gbm" => Ok(gbm_game(get("mu", 0.05), get("eta", 0.2), get("x0", 1.0))),
        other => Err(Error::InvalidCompactSet(format!(
            "unknown game catalog entry {other:?}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Static single-period counterexample
// ---------------------------------------------------------------------------

/// Deterministic single-period game on `[0,1]^2`.
#[derive(Clone)]
pub struct StaticGame {
    pub loss0: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    pub loss1: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

/// The counterexample: `l1 = u0 u1` (convex but not strongly convex in u1)
/// and `l0 = -u1`. Best responses collapse to `{0}` for `u0 > 0` while
/// every response is optimal at `u0 = 0`.
pub fn counterexample_static() -> StaticGame {
    StaticGame {
        loss0: Arc::new(|_u0, u1| -u1),
        loss1: Arc::new(|u0, u1| u0 * u1),
    }
}

/// Effective leader value `inf over best responses of l0`: exactly `-1`
/// at `u0 = 0` and `0` elsewhere.
pub fn counterexample_value(u0: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u0) {
        return Err(Error::TimeOutOfRange { t: u0, horizon: 1.0 });
    }
    Ok(if u0 == 0.0 { -1.0 } else { 0.0 })
}

/// Grid-enumeration variant over `u1 in {0, 1/g, ..., 1}`: exhaustive
/// minimization of the follower loss followed by the leader's infimum over
/// the exact argmin set.
pub fn counterexample_value_grid(u0: f64, g: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&u0) {
        return Err(Error::TimeOutOfRange { t: u0, horizon: 1.0 });
    }
    let game = counterexample_static();
    let mut best_l1 = f64::INFINITY;
    for i in 0..=g {
        let u1 = i as f64 / g as f64;
        best_l1 = best_l1.min((game.loss1)(u0, u1));
    }
    let mut value = f64::INFINITY;
    for i in 0..=g {
        let u1 = i as f64 / g as f64;
        if (game.loss1)(u0, u1) == best_l1 {
            value = value.min((game.loss0)(u0, u1));
        }
    }
    Ok(value)
}

impl Tape {
    /// Multiply a chunk vector by a factor that may be a scalar node or a
    /// chunk vector of its own.
    fn mul_broadcast_or_mul(&mut self, v: Var, factor: Var) -> Var {
        if self.value(factor).len() == 1 {
            self.mul_broadcast(v, factor)
        } else {
            self.mul(v, factor)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::HorizonConfig;
    use crate::process::{inner_product, norm};

    fn ensemble(steps: usize, scenarios: usize, seed: u64) -> BrownianEnsemble {
        let cfg = HorizonConfig::new(1.0, steps, 1).unwrap();
        BrownianEnsemble::new(cfg, scenarios, seed)
    }

    fn frozen_game() -> GameSpec {
        // f = sigma = 0 so the state never moves
        quadratic_tracking_game(0.0, 1.0)
    }

    #[test]
    fn zero_coefficients_freeze_state() {
        let e = ensemble(16, 8, 1);
        let mut spec = frozen_game();
        spec.x0 = vec![3.5];
        let u = AdaptedProcess::constant(&[0.0], &e);
        let path = simulate(&spec, &u, &u, &e).unwrap();
        for p in 0..8 {
            for m in 0..=16 {
                assert_eq!(path.values[(p, m, 0)], 3.5);
            }
        }
    }

    #[test]
    fn deterministic_ode_matches_exponential() {
        // f = x, sigma = 0, X_0 = 1: X_T = e with O(dt) error
        let e = ensemble(256, 2, 3);
        let spec = gbm_game(1.0, 0.0, 1.0);
        let u = AdaptedProcess::constant(&[0.0], &e);
        let path = simulate(&spec, &u, &u, &e).unwrap();
        let x_t = path.values[(0, 256, 0)];
        let tol = 5.0 / 256.0;
        assert!(
            (x_t - std::f64::consts::E).abs() < tol,
            "X_T = {x_t}, tol {tol}"
        );
    }

    #[test]
    fn gbm_mean_matches_closed_form() {
        let e = ensemble(256, 8192, 17);
        let (mu, eta) = (0.5, 0.3);
        let spec = gbm_game(mu, eta, 1.0);
        let u = AdaptedProcess::constant(&[0.0], &e);
        // terminal cost is x, so cost = E[X_T]
        let mean = cost(&spec, 0, &u, &u, &e).unwrap();
        let want = (mu * 1.0f64).exp();
        // MC 3 sigma + O(dt) allowance
        let sd_terminal = (want * want * ((eta * eta * 1.0f64).exp() - 1.0)).sqrt();
        let tol = 3.0 * sd_terminal / (8192f64).sqrt() + 4.0 * want / 256.0;
        assert!((mean - want).abs() < tol, "mean {mean} want {want} tol {tol}");
    }

    #[test]
    fn pure_quadratic_cost_reduces_to_norm() {
        // f = sigma = 0, L1 = |u1 - u0|^2 with u0 = 0 reduces to the
        // squared process norm
        let e = ensemble(64, 256, 5);
        let spec = frozen_game();
        let zero = AdaptedProcess::constant(&[0.0], &e);
        let c = AdaptedProcess::constant(&[1.7], &e);
        let j = cost(&spec, 1, &zero, &c, &e).unwrap();
        let n2 = inner_product(&c, &c).unwrap();
        assert!((j - n2).abs() < 1e-12);
    }

    #[test]
    fn terminal_identity_returns_initial_state() {
        let e = ensemble(16, 32, 5);
        let mut spec = gbm_game(0.0, 0.0, 0.0);
        spec.x0 = vec![2.25];
        let u = AdaptedProcess::constant(&[0.0], &e);
        let j = cost(&spec, 0, &u, &u, &e).unwrap();
        assert!((j - 2.25).abs() < 1e-12);
    }

    #[test]
    fn explosion_reports_first_bad_node() {
        let e = ensemble(16, 4, 9);
        // violent super-exponential growth
        let spec = GameSpec {
            drift: Arc::new(|t, x, _u0, _u1| {
                let sq = t.mul(x[0], x[0]);
                vec![t.scale(sq, 1e6)]
            }),
            ..gbm_game(0.0, 0.0, 10.0)
        };
        let u = AdaptedProcess::constant(&[0.0], &e);
        match simulate(&spec, &u, &u, &e) {
            Err(Error::Explosion { step, .. }) => assert!(step >= 1),
            other => panic!("expected explosion, got {other:?}"),
        }
    }

    #[test]
    fn coefficient_gradient_matches_finite_differences() {
        let cfg = HorizonConfig::new(1.0, 32, 1).unwrap();
        let e = BrownianEnsemble::new(cfg, 256, 23);
        let spec = convex_scalar_game(0.2, 0.1, 0.0);
        let elements = crate::chaos::basis_elements(5, &cfg);
        let u0 = AdaptedProcess::constant(&[0.4], &e);
        let coeffs = vec![0.3, -0.2, 0.5, 0.1, -0.4];
        let control = CoeffControl::new(elements.clone(), coeffs.clone(), 1).unwrap();
        let eval = cost_eval(
            &spec,
            1,
            &ControlSide::Fixed(&u0),
            &ControlSide::Basis {
                control: &control,
                trainable: true,
            },
            &e,
        )
        .unwrap();
        let grad = eval.grad_u1.unwrap();
        let h = 1e-5;
        for i in 0..coeffs.len() {
            let mut plus = coeffs.clone();
            plus[i] += h;
            let mut minus = coeffs.clone();
            minus[i] -= h;
            let cp = CoeffControl::new(elements.clone(), plus, 1).unwrap();
            let cm = CoeffControl::new(elements.clone(), minus, 1).unwrap();
            let jp = cost(&spec, 1, &u0, &cp.process(&e).unwrap(), &e).unwrap();
            let jm = cost(&spec, 1, &u0, &cm.process(&e).unwrap(), &e).unwrap();
            let fd = (jp - jm) / (2.0 * h);
            let denom = grad[i].abs().max(1e-8);
            assert!(
                ((grad[i] - fd) / denom).abs() < 1e-4,
                "i = {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn coeff_control_process_matches_combination() {
        let cfg = HorizonConfig::new(1.0, 32, 1).unwrap();
        let e = BrownianEnsemble::new(cfg, 64, 2);
        let elements = crate::chaos::basis_elements(3, &cfg);
        let control = CoeffControl::new(elements.clone(), vec![1.0, -2.0, 0.5], 1).unwrap();
        let proc = control.process(&e).unwrap();
        let parts: Vec<AdaptedProcess> = elements
            .iter()
            .map(|el| crate::chaos::evaluate_basis(el, &e).unwrap())
            .collect();
        let manual = AdaptedProcess::linear_combination(&[
            (1.0, &parts[0]),
            (-2.0, &parts[1]),
            (0.5, &parts[2]),
        ])
        .unwrap();
        let diff = AdaptedProcess::linear_combination(&[(1.0, &proc), (-1.0, &manual)]).unwrap();
        assert!(norm(&diff).unwrap() < 1e-12);
    }

    #[test]
    fn counterexample_values() {
        assert_eq!(counterexample_value(0.0).unwrap(), -1.0);
        assert_eq!(counterexample_value(0.5).unwrap(), 0.0);
        assert!(counterexample_value(1.5).is_err());
        assert_eq!(counterexample_value_grid(1e-6, 10_000).unwrap(), 0.0);
        assert_eq!(counterexample_value_grid(0.0, 10_000).unwrap(), -1.0);
    }

    #[test]
    fn strongly_convex_assembly_rejects_nonpositive_modulus() {
        let zero_vec: Arc<dyn Fn(&mut Tape, &[Var]) -> Vec<Var> + Send + Sync> =
            Arc::new(|t: &mut Tape, u: &[Var]| vec![scalar_zero(t, u[0])]);
        let one: Arc<dyn Fn(&mut Tape, &[Var]) -> Var + Send + Sync> =
            Arc::new(|t: &mut Tape, u: &[Var]| {
                let z = scalar_zero(t, u[0]);
                t.offset(z, 1.0)
            });
        let params = StronglyConvexParams {
            state_dim: 1,
            leader_dim: 1,
            follower_dim: 1,
            a: vec![0.0],
            b: vec![0.0],
            a_sigma: vec![0.0],
            b_sigma: vec![0.0],
            c: one.clone(),
            c_sigma: one.clone(),
            c_l: one.clone(),
            c_l_inf: 0.0, // makes kappa = 0
            d_shift: zero_vec.clone(),
            d_sigma_shift: zero_vec,
            l1_core: Arc::new(|t, _x, _u0, u1| t.mul(u1[0], u1[0])),
            l1_core_modulus: 2.0,
            l1_leader_term: Arc::new(|t: &mut Tape, u: &[Var]| scalar_zero(t, u[0])),
            g1: Arc::new(|t, x| scalar_zero(t, x[0])),
            l0: Arc::new(|t, x, _u0, _u1| scalar_zero(t, x[0])),
            g0: Arc::new(|t, x| scalar_zero(t, x[0])),
            x0: vec![0.0],
            lipschitz_bound: 4.0,
        };
        assert!(matches!(
            catalog_strongly_convex(params),
            Err(Error::NonPositiveModulus(_))
        ));
    }

    #[test]
    fn pure_quadratic_assembled_modulus() {
        // all matrices zero, L1_core = |u1|^2 -> kappa = 2 * inf C_L
        let zero_vec: Arc<dyn Fn(&mut Tape, &[Var]) -> Vec<Var> + Send + Sync> =
            Arc::new(|t: &mut Tape, u: &[Var]| vec![scalar_zero(t, u[0])]);
        let half: Arc<dyn Fn(&mut Tape, &[Var]) -> Var + Send + Sync> =
            Arc::new(|t: &mut Tape, u: &[Var]| {
                let z = scalar_zero(t, u[0]);
                t.offset(z, 0.5)
            });
        let params = StronglyConvexParams {
            state_dim: 1,
            leader_dim: 1,
            follower_dim: 1,
            a: vec![0.0],
            b: vec![0.0],
            a_sigma: vec![0.0],
            b_sigma: vec![0.0],
            c: half.clone(),
            c_sigma: half.clone(),
            c_l: half.clone(),
            c_l_inf: 0.5,
            d_shift: zero_vec.clone(),
            d_sigma_shift: zero_vec,
            l1_core: Arc::new(|t, _x, _u0, u1| t.mul(u1[0], u1[0])),
            l1_core_modulus: 2.0,
            l1_leader_term: Arc::new(|t: &mut Tape, u: &[Var]| scalar_zero(t, u[0])),
            g1: Arc::new(|t, x| scalar_zero(t, x[0])),
            l0: Arc::new(|t, x, _u0, _u1| scalar_zero(t, x[0])),
            g0: Arc::new(|t, x| scalar_zero(t, x[0])),
            x0: vec![0.0],
            lipschitz_bound: 4.0,
        };
        let spec = catalog_strongly_convex(params).unwrap();
        assert_eq!(spec.convexity_modulus, Some(1.0));
    }

    #[test]
    fn lipschitz_validation_flags_quadratic_growth() {
        let spec = convex_scalar_game(0.2, 0.1, 0.0);
        let small = validate_lipschitz(&spec, 50, 0.5, 1);
        assert!(small.observed > 0.0);
        // quadratic costs break any declared bound far from the origin
        let large = validate_lipschitz(&spec, 200, 100.0, 1);
        assert!(!large.within);
    }
}
