//! Follower best-response computation over truncated basis coefficients.
//!
//! The follower control is parameterized as `u1 = sum_i beta_i s_i` in the
//! leading basis elements (open-loop, dimension independent of the grid),
//! and `J_1(u0, .)` is minimized by gradient descent through the
//! differentiable simulator. Strong convexity of the follower Hamiltonian
//! carries over to the coefficient problem because the parameterization is
//! orthonormal, which is what makes the certificates below meaningful.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::brownian::BrownianEnsemble;
use crate::error::{Error, Result};
use crate::game::{cost_eval, CoeffControl, ControlSide, GameSpec};
use crate::process::{
    mean_and_se, scenario_inner_products, AdaptedProcess,
};

#[derive(Debug, Clone, Copy)]
pub enum StepRule {
    Fixed(f64),
    /// Armijo backtracking (c = 1e-4, halving) from the given initial step.
    Backtracking { initial: f64 },
}

#[derive(Debug, Clone)]
pub struct ResponseSolveConfig {
    /// Number of leading basis elements per control component.
    pub basis_len: usize,
    pub max_iters: usize,
    pub step_rule: StepRule,
    /// Stationarity threshold on the coefficient gradient norm.
    pub grad_tol: f64,
    /// Number of independent initializations (the first is always zero).
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ResponseSolveConfig {
    fn default() -> Self {
        Self {
            basis_len: 8,
            max_iters: 400,
            step_rule: StepRule::Backtracking { initial: 0.5 },
            grad_tol: 1e-6,
            restarts: 1,
            seed: 0,
        }
    }
}

/// Agreement of independently initialized solves; under strong convexity
/// every stationary-to-tolerance point lies within `grad_tol / kappa` of
/// the unique minimizer, so the pairwise spread is bounded by
/// `2 grad_tol / kappa`.
#[derive(Debug, Clone)]
pub struct RestartAgreement {
    pub max_coeff_spread: f64,
    pub bound: f64,
}

#[derive(Debug, Clone)]
pub struct ResponseResult {
    pub coeffs: Vec<f64>,
    pub process: AdaptedProcess,
    pub objective: f64,
    pub grad_norm: f64,
    pub certificate: Option<RestartAgreement>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

struct Descent<'a> {
    spec: &'a GameSpec,
    u0: &'a AdaptedProcess,
    elements: Vec<crate::chaos::BasisElement>,
    ensemble: &'a BrownianEnsemble,
    dim: usize,
}

impl Descent<'_> {
    fn objective_and_grad(&self, coeffs: &[f64]) -> Result<(f64, Vec<f64>)> {
        let control = CoeffControl::new(self.elements.clone(), coeffs.to_vec(), self.dim)?;
        let eval = cost_eval(
            self.spec,
            1,
            &ControlSide::Fixed(self.u0),
            &ControlSide::Basis {
                control: &control,
                trainable: true,
            },
            self.ensemble,
        )?;
        Ok((eval.value, eval.grad_u1.expect("trainable side")))
    }

    fn objective(&self, coeffs: &[f64]) -> Result<f64> {
        let control = CoeffControl::new(self.elements.clone(), coeffs.to_vec(), self.dim)?;
        Ok(cost_eval(
            self.spec,
            1,
            &ControlSide::Fixed(self.u0),
            &ControlSide::Basis {
                control: &control,
                trainable: false,
            },
            self.ensemble,
        )?
        .value)
    }

    fn run(
        &self,
        mut coeffs: Vec<f64>,
        cfg: &ResponseSolveConfig,
    ) -> Result<(Vec<f64>, f64, f64)> {
        let mut step = match cfg.step_rule {
            StepRule::Fixed(s) => s,
            StepRule::Backtracking { initial } => initial,
        };
        let (mut value, mut grad) = self.objective_and_grad(&coeffs)?;
        for _ in 0..cfg.max_iters {
            let gn = l2(&grad);
            if gn <= cfg.grad_tol {
                return Ok((coeffs, value, gn));
            }
            match cfg.step_rule {
                StepRule::Fixed(s) => {
                    for (c, g) in coeffs.iter_mut().zip(&grad) {
                        *c -= s * g;
                    }
                    let (v, g) = self.objective_and_grad(&coeffs)?;
                    value = v;
                    grad = g;
                }
                StepRule::Backtracking { initial } => {
                    let mut accepted = false;
                    for _ in 0..50 {
                        let trial: Vec<f64> = coeffs
                            .iter()
                            .zip(&grad)
                            .map(|(c, g)| c - step * g)
                            .collect();
                        let trial_value = self.objective(&trial)?;
                        if trial_value <= value - 1e-4 * step * gn * gn {
                            coeffs = trial;
                            let (v, g) = self.objective_and_grad(&coeffs)?;
                            value = v;
                            grad = g;
                            step = (step * 1.5).min(initial.max(1.0));
                            accepted = true;
                            break;
                        }
                        step *= 0.5;
                    }
                    if !accepted {
                        break;
                    }
                }
            }
        }
        let gn = l2(&grad);
        if gn <= cfg.grad_tol {
            return Ok((coeffs, value, gn));
        }
        Err(Error::NonConvergence {
            iters: cfg.max_iters,
            grad_norm: gn,
            tol: cfg.grad_tol,
            objective: value,
            last_coeffs: coeffs,
        })
    }
}

/// Minimize `J_1(u0, sum beta_i s_i)` over the truncated span.
///
/// Requires a declared positive convexity modulus; without it the unique-
/// minimizer certificate is impossible and the solver refuses.
pub fn solve(
    spec: &GameSpec,
    u0: &AdaptedProcess,
    cfg: &ResponseSolveConfig,
    ensemble: &BrownianEnsemble,
) -> Result<ResponseResult> {
    let kappa = spec
        .convexity_modulus
        .ok_or(Error::MissingConvexityModulus)?;
    if !(kappa > 0.0) {
        return Err(Error::NonPositiveModulus(kappa));
    }
    let elements = crate::chaos::basis_elements(cfg.basis_len, ensemble.cfg());
    let descent = Descent {
        spec,
        u0,
        elements: elements.clone(),
        ensemble,
        dim: spec.follower_dim,
    };
    let n = cfg.basis_len * spec.follower_dim;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut solutions: Vec<(Vec<f64>, f64, f64)> = Vec::new();
    for restart in 0..cfg.restarts.max(1) {
        let init: Vec<f64> = if restart == 0 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
        };
        solutions.push(descent.run(init, cfg)?);
    }
    let certificate = if solutions.len() >= 2 {
        let mut spread: f64 = 0.0;
        for i in 0..solutions.len() {
            for j in i + 1..solutions.len() {
                let d: f64 = solutions[i]
                    .0
                    .iter()
                    .zip(&solutions[j].0)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                spread = spread.max(d);
            }
        }
        Some(RestartAgreement {
            max_coeff_spread: spread,
            bound: 2.0 * cfg.grad_tol / kappa,
        })
    } else {
        None
    };
    let best = solutions
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one restart");
    let control = CoeffControl::new(elements, best.0.clone(), spec.follower_dim)?;
    Ok(ResponseResult {
        coeffs: best.0,
        process: control.process(ensemble)?,
        objective: best.1,
        grad_norm: best.2,
        certificate,
    })
}

/// Exhaustive best response over a finite candidate set; ties break to the
/// lowest index.
pub fn enumerate_best_response(
    spec: &GameSpec,
    u0: &AdaptedProcess,
    candidates: &[AdaptedProcess],
    ensemble: &BrownianEnsemble,
) -> Result<(usize, f64)> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("best-response candidates"));
    }
    let mut best = (0usize, f64::INFINITY);
    for (i, cand) in candidates.iter().enumerate() {
        let value = crate::game::cost(spec, 1, u0, cand, ensemble)?;
        if value < best.1 {
            best = (i, value);
        }
    }
    Ok(best)
}

/// Strong-convexity continuous-dependence certificate for one pair of
/// leader controls: with `U = U*(u0)` and `V = U*(u0~)`,
///
/// ```text
/// lhs = kappa/2 ||U - V||^2   <=   rhs = J1(u0, V) - J1(u0, U)
/// ```
///
/// estimated scenario-by-scenario on the shared ensemble so the reported
/// standard error applies to the slack itself.
#[derive(Debug, Clone)]
pub struct ConvexityReport {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub slack_se: f64,
}

pub fn convexity_certificate(
    spec: &GameSpec,
    u0: &AdaptedProcess,
    response_main: &ResponseResult,
    response_other: &ResponseResult,
    ensemble: &BrownianEnsemble,
) -> Result<ConvexityReport> {
    let kappa = spec
        .convexity_modulus
        .ok_or(Error::MissingConvexityModulus)?;
    let at_other = cost_eval(
        spec,
        1,
        &ControlSide::Fixed(u0),
        &ControlSide::Fixed(&response_other.process),
        ensemble,
    )?;
    let at_main = cost_eval(
        spec,
        1,
        &ControlSide::Fixed(u0),
        &ControlSide::Fixed(&response_main.process),
        ensemble,
    )?;
    let diff = AdaptedProcess::linear_combination(&[
        (1.0, &response_main.process),
        (-1.0, &response_other.process),
    ])?;
    let sq = scenario_inner_products(&diff, &diff)?;
    let slack_samples: Vec<f64> = at_other
        .scenario_values
        .iter()
        .zip(&at_main.scenario_values)
        .zip(&sq)
        .map(|((jo, jm), d2)| (jo - jm) - 0.5 * kappa * d2)
        .collect();
    let (slack, slack_se) = mean_and_se(&slack_samples);
    let lhs = 0.5 * kappa * sq.iter().sum::<f64>() / sq.len() as f64;
    let rhs = at_other.value - at_main.value;
    Ok(ConvexityReport {
        lhs,
        rhs,
        slack,
        slack_se,
    })
}

/// One row of the Hoelder diagnostic table.
#[derive(Debug, Clone)]
pub struct HolderRow {
    pub pair_id: usize,
    pub du0_norm: f64,
    pub du_norm: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub slack_se: f64,
    /// `(2/sqrt(kappa)) * sqrt(2 C_hat du0)`.
    pub holder_bound: f64,
    pub within_bound: bool,
}

#[derive(Debug, Clone)]
pub struct HolderDiagnostic {
    pub rows: Vec<HolderRow>,
    /// Empirical cost-Lipschitz constant used in the bound.
    pub c_hat: f64,
}

/// Solve both responses per pair and check the square-root continuity bound
/// `||U*(u0) - U*(u0~)|| <= (2/sqrt(kappa)) (2 C_hat ||u0 - u0~||)^{1/2}`
/// with `C_hat` the largest observed cost-difference ratio.
pub fn holder_diagnostic(
    spec: &GameSpec,
    pairs: &[(AdaptedProcess, AdaptedProcess)],
    cfg: &ResponseSolveConfig,
    ensemble: &BrownianEnsemble,
) -> Result<HolderDiagnostic> {
    let kappa = spec
        .convexity_modulus
        .ok_or(Error::MissingConvexityModulus)?;
    let mut solved = Vec::with_capacity(pairs.len());
    let mut c_hat: f64 = 0.0;
    for (u0, u0_alt) in pairs {
        let main = solve(spec, u0, cfg, ensemble)?;
        let alt = solve(spec, u0_alt, cfg, ensemble)?;
        let du0 = {
            let d = AdaptedProcess::linear_combination(&[(1.0, u0), (-1.0, u0_alt)])?;
            crate::process::norm(&d)?
        };
        if du0 > 1e-12 {
            let j_cross = crate::game::cost(spec, 1, u0, &alt.process, ensemble)?;
            let j_alt = crate::game::cost(spec, 1, u0_alt, &alt.process, ensemble)?;
            let j_main = crate::game::cost(spec, 1, u0, &main.process, ensemble)?;
            c_hat = c_hat
                .max((j_cross - j_alt).abs() / du0)
                .max((j_alt - j_main).abs() / du0);
        }
        solved.push((main, alt, du0));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for (pair_id, ((u0, _), (main, alt, du0))) in pairs.iter().zip(&solved).enumerate() {
        let report = convexity_certificate(spec, u0, main, alt, ensemble)?;
        let diff =
            AdaptedProcess::linear_combination(&[(1.0, &main.process), (-1.0, &alt.process)])?;
        let du = crate::process::norm(&diff)?;
        let holder_bound = 2.0 / kappa.sqrt() * (2.0 * c_hat * du0).sqrt();
        rows.push(HolderRow {
            pair_id,
            du0_norm: *du0,
            du_norm: du,
            lhs: report.lhs,
            rhs: report.rhs,
            slack: report.slack,
            slack_se: report.slack_se,
            holder_bound,
            within_bound: du <= holder_bound + 3.0 * report.slack_se.max(1e-9) + 1e-6,
        });
    }
    Ok(HolderDiagnostic { rows, c_hat })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{decoupled_quadratic_game, quadratic_tracking_game};
    use crate::grid::HorizonConfig;
    use crate::process::{combine, encode, norm, ProjectionBasis};

    fn setup(seed: u64) -> (HorizonConfig, BrownianEnsemble) {
        let cfg = HorizonConfig::new(1.0, 32, 1).unwrap();
        (cfg, BrownianEnsemble::new(cfg, 512, seed))
    }

    fn quick_cfg() -> ResponseSolveConfig {
        ResponseSolveConfig {
            basis_len: 5,
            max_iters: 600,
            grad_tol: 1e-8,
            ..Default::default()
        }
    }

    #[test]
    fn refuses_without_modulus() {
        let (_, e) = setup(1);
        let mut spec = quadratic_tracking_game(0.0, 1.0);
        spec.convexity_modulus = None;
        let u0 = AdaptedProcess::constant(&[0.0], &e);
        assert!(matches!(
            solve(&spec, &u0, &quick_cfg(), &e),
            Err(Error::MissingConvexityModulus)
        ));
        spec.convexity_modulus = Some(-1.0);
        assert!(matches!(
            solve(&spec, &u0, &quick_cfg(), &e),
            Err(Error::NonPositiveModulus(_))
        ));
    }

    #[test]
    fn constant_target_recovers_projection() {
        // L1 = |u1 - c|^2: the solution is the projection of the constant
        let (cfg, e) = setup(2);
        let spec = quadratic_tracking_game(1.3, 0.0);
        let u0 = AdaptedProcess::constant(&[0.0], &e);
        let solve_cfg = quick_cfg();
        let result = solve(&spec, &u0, &solve_cfg, &e).unwrap();
        assert!(result.grad_norm <= solve_cfg.grad_tol);

        let basis = ProjectionBasis::leading(solve_cfg.basis_len, &cfg);
        let target = AdaptedProcess::constant(&[1.3], &e);
        let (proj_coeffs, projection) = crate::process::project(&target, &basis, &e).unwrap();
        for (a, b) in result.coeffs.iter().zip(&proj_coeffs) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        // J1 at the optimum is the residual projection error
        let resid =
            AdaptedProcess::linear_combination(&[(1.0, &target), (-1.0, &projection)]).unwrap();
        let expect = crate::process::inner_product(&resid, &resid).unwrap();
        assert!((result.objective - expect).abs() < 1e-6);
    }

    #[test]
    fn affine_target_matches_projected_map() {
        let (cfg, e) = setup(3);
        let spec = quadratic_tracking_game(0.2, 0.8);
        let basis = ProjectionBasis::leading(5, &cfg);
        // leader control: a basis combination, so a(u0) is in closed form
        let u0 = combine(&basis, &[0.5, -0.3, 0.2, 0.0, 0.1], &e).unwrap();
        let result = solve(&spec, &u0, &quick_cfg(), &e).unwrap();
        // oracle: project 0.2 + 0.8 u0
        let af = AdaptedProcess::linear_combination(&[(0.8, &u0)]).unwrap();
        let shift = AdaptedProcess::constant(&[0.2], &e);
        let target = AdaptedProcess::linear_combination(&[(1.0, &af), (1.0, &shift)]).unwrap();
        let want = encode(&target, &basis, &e).unwrap();
        for (a, b) in result.coeffs.iter().zip(&want) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn matches_enumeration_on_candidates() {
        let (cfg, e) = setup(4);
        let spec = decoupled_quadratic_game();
        let basis = ProjectionBasis::leading(4, &cfg);
        let u0 = combine(&basis, &[0.4, 0.1, -0.2, 0.3], &e).unwrap();
        let solved = solve(
            &spec,
            &u0,
            &ResponseSolveConfig {
                basis_len: 4,
                grad_tol: 1e-9,
                ..quick_cfg()
            },
            &e,
        )
        .unwrap();
        let zero = AdaptedProcess::zero(1, &e);
        let candidates = vec![zero, solved.process.clone()];
        let (idx, value) = enumerate_best_response(&spec, &u0, &candidates, &e).unwrap();
        assert_eq!(idx, 1);
        assert!((value - solved.objective).abs() < 1e-9);
        // single candidate and duplicated-best tiebreaks
        let (idx0, _) = enumerate_best_response(&spec, &u0, &candidates[..1].to_vec(), &e).unwrap();
        assert_eq!(idx0, 0);
        let dup = vec![solved.process.clone(), solved.process.clone()];
        let (idx_dup, _) = enumerate_best_response(&spec, &u0, &dup, &e).unwrap();
        assert_eq!(idx_dup, 0);
    }

    #[test]
    fn restarts_agree_under_strong_convexity() {
        let (_, e) = setup(5);
        let spec = decoupled_quadratic_game();
        let u0 = AdaptedProcess::constant(&[0.7], &e);
        let cfg = ResponseSolveConfig {
            restarts: 3,
            grad_tol: 1e-8,
            ..quick_cfg()
        };
        let result = solve(&spec, &u0, &cfg, &e).unwrap();
        let cert = result.certificate.unwrap();
        assert!(
            cert.max_coeff_spread <= cert.bound,
            "spread {} bound {}",
            cert.max_coeff_spread,
            cert.bound
        );
    }

    #[test]
    fn identical_pair_has_zero_slack() {
        let (_, e) = setup(6);
        let spec = decoupled_quadratic_game();
        let u0 = AdaptedProcess::constant(&[0.5], &e);
        let cfg = quick_cfg();
        let a = solve(&spec, &u0, &cfg, &e).unwrap();
        let b = solve(&spec, &u0, &cfg, &e).unwrap();
        let report = convexity_certificate(&spec, &u0, &a, &b, &e).unwrap();
        assert!(report.lhs.abs() < 1e-10);
        assert!(report.rhs.abs() < 1e-10);
        assert!(report.slack.abs() < 1e-10);
    }

    #[test]
    fn certificate_slack_nonnegative_in_quadratic_game() {
        let (cfg_h, e) = setup(7);
        let spec = decoupled_quadratic_game();
        let basis = ProjectionBasis::leading(4, &cfg_h);
        let u0 = combine(&basis, &[0.6, 0.0, 0.2, -0.1], &e).unwrap();
        let u0_alt = combine(&basis, &[0.1, 0.3, -0.2, 0.4], &e).unwrap();
        let cfg = ResponseSolveConfig {
            basis_len: 4,
            grad_tol: 1e-9,
            ..quick_cfg()
        };
        let main = solve(&spec, &u0, &cfg, &e).unwrap();
        let alt = solve(&spec, &u0_alt, &cfg, &e).unwrap();
        let report = convexity_certificate(&spec, &u0, &main, &alt, &e).unwrap();
        assert!(
            report.slack >= -(3.0 * report.slack_se + 1e-6),
            "slack {} se {}",
            report.slack,
            report.slack_se
        );
    }

    #[test]
    fn holder_rows_on_closed_form_game() {
        // a(u0) = u0: responses are projections, so the diagnostic has a
        // closed-form oracle
        let (cfg_h, e) = setup(8);
        let spec = decoupled_quadratic_game();
        let basis = ProjectionBasis::leading(4, &cfg_h);
        let base = combine(&basis, &[0.5, 0.2, -0.1, 0.3], &e).unwrap();
        let mut pairs = Vec::new();
        for k in 0..3 {
            let delta = 0.2 * (k + 1) as f64;
            let shifted = combine(&basis, &[0.5 + delta, 0.2, -0.1, 0.3], &e).unwrap();
            pairs.push((base.clone(), shifted));
        }
        let diag = holder_diagnostic(
            &spec,
            &pairs,
            &ResponseSolveConfig {
                basis_len: 4,
                grad_tol: 1e-9,
                ..quick_cfg()
            },
            &e,
        )
        .unwrap();
        for row in &diag.rows {
            // coincident responses track the projected difference
            assert!((row.du_norm - row.du0_norm).abs() < 1e-3);
            assert!(row.within_bound, "row {row:?}");
            assert!(row.slack >= -(3.0 * row.slack_se + 1e-6));
        }
    }

    #[test]
    fn first_order_optimality_gap() {
        let (cfg_h, e) = setup(9);
        let spec = decoupled_quadratic_game();
        let kappa = spec.convexity_modulus.unwrap();
        let basis = ProjectionBasis::leading(4, &cfg_h);
        let u0 = combine(&basis, &[0.3, -0.2, 0.1, 0.0], &e).unwrap();
        let cfg = ResponseSolveConfig {
            basis_len: 4,
            grad_tol: 1e-9,
            ..quick_cfg()
        };
        let star = solve(&spec, &u0, &cfg, &e).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..20 {
            let coeffs: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let probe = combine(&basis, &coeffs, &e).unwrap();
            let j_probe = crate::game::cost(&spec, 1, &u0, &probe, &e).unwrap();
            let d =
                AdaptedProcess::linear_combination(&[(1.0, &probe), (-1.0, &star.process)])
                    .unwrap();
            let gap = j_probe - star.objective;
            let want = 0.5 * kappa * norm(&d).unwrap().powi(2);
            assert!(gap >= want - 1e-6, "gap {gap} want {want}");
        }
    }
}
