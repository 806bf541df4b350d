//! Discretized space of square-integrable predictable processes.
//!
//! A process holds one value per `(scenario, step, component)`, interpreted
//! as the value on `[t_m, t_{m+1})`. Predictability on the grid means the
//! value at step `m` may depend on Brownian increments with index `< m`
//! only. Processes built through a [`CausalEvaluator`] carry that evaluator
//! so the property can be re-verified by resampling future increments.
//!
//! Expectations are Monte-Carlo means over the shared ensemble with a fixed
//! reduction order (scenario-major, then step, then component), so repeated
//! runs are bit-identical.

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::Write;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::Array3;

use crate::brownian::{BrownianEnsemble, EnsembleKey};
use crate::chaos::BasisElement;
use crate::error::{Error, Result};
use crate::grid::HorizonConfig;
use crate::rng::splitmix64;

/// Anything that can causally regenerate its values from an ensemble.
pub trait CausalEvaluator {
    fn evaluate(&self, ensemble: &BrownianEnsemble) -> Result<Array3<f64>>;
    fn value_dim(&self) -> usize;
}

#[derive(Clone)]
pub enum Provenance {
    Causal(Arc<dyn CausalEvaluator>),
    Unchecked,
}

impl std::fmt::Debug for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Causal(_) => write!(f, "Causal"),
            Provenance::Unchecked => write!(f, "Unchecked"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdaptedProcess {
    values: Array3<f64>,
    provenance: Provenance,
    key: EnsembleKey,
    cfg: HorizonConfig,
}

impl AdaptedProcess {
    /// Build by running a causal evaluator on the ensemble.
    pub fn from_causal(
        evaluator: Arc<dyn CausalEvaluator>,
        ensemble: &BrownianEnsemble,
    ) -> Result<Self> {
        let values = evaluator.evaluate(ensemble)?;
        Ok(Self {
            values,
            provenance: Provenance::Causal(evaluator),
            key: ensemble.key(),
            cfg: *ensemble.cfg(),
        })
    }

    /// Wrap a raw array; the result cannot pass the adaptedness check.
    pub fn from_raw(values: Array3<f64>, ensemble: &BrownianEnsemble) -> Result<Self> {
        if values.shape()[0] != ensemble.scenarios() || values.shape()[1] != ensemble.cfg().steps {
            return Err(Error::DimensionMismatch {
                context: "process array",
                expected: ensemble.scenarios() * ensemble.cfg().steps,
                actual: values.shape()[0] * values.shape()[1],
            });
        }
        Ok(Self {
            values,
            provenance: Provenance::Unchecked,
            key: ensemble.key(),
            cfg: *ensemble.cfg(),
        })
    }

    pub fn zero(dim: usize, ensemble: &BrownianEnsemble) -> Self {
        Self::constant(&vec![0.0; dim], ensemble)
    }

    /// Deterministic constant-in-time process.
    pub fn constant(value: &[f64], ensemble: &BrownianEnsemble) -> Self {
        let profile = vec![value.to_vec(); ensemble.cfg().steps];
        Self::from_profile(profile, ensemble)
    }

    /// Deterministic process from per-step values.
    pub fn from_profile(profile: Vec<Vec<f64>>, ensemble: &BrownianEnsemble) -> Self {
        let eval = Arc::new(DeterministicProfile { profile });
        Self::from_causal(eval, ensemble).expect("deterministic profiles always evaluate")
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn scenarios(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn value_dim(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn cfg(&self) -> &HorizonConfig {
        &self.cfg
    }

    pub fn ensemble_key(&self) -> EnsembleKey {
        self.key
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.key != other.key {
            return Err(Error::EnsembleMismatch);
        }
        if self.value_dim() != other.value_dim() {
            return Err(Error::DimensionMismatch {
                context: "process value dimension",
                expected: self.value_dim(),
                actual: other.value_dim(),
            });
        }
        Ok(())
    }

    /// Linear combination of processes on one ensemble. Stays causal when
    /// every term is causal.
    pub fn linear_combination(terms: &[(f64, &AdaptedProcess)]) -> Result<Self> {
        let first = terms.first().ok_or(Error::EmptyInput("linear combination"))?.1;
        let mut values = Array3::zeros(first.values.raw_dim());
        let mut evals = Vec::with_capacity(terms.len());
        let mut causal = true;
        for (w, term) in terms {
            first.check_compatible(term)?;
            values.scaled_add(*w, &term.values);
            match &term.provenance {
                Provenance::Causal(e) => evals.push((*w, Arc::clone(e))),
                Provenance::Unchecked => causal = false,
            }
        }
        let provenance = if causal {
            Provenance::Causal(Arc::new(LinearCombination {
                terms: evals,
                dim: first.value_dim(),
            }))
        } else {
            Provenance::Unchecked
        };
        Ok(Self {
            values,
            provenance,
            key: first.key,
            cfg: first.cfg,
        })
    }
}

/// Deterministic control given by per-step values.
pub struct DeterministicProfile {
    pub profile: Vec<Vec<f64>>,
}

impl CausalEvaluator for DeterministicProfile {
    fn evaluate(&self, ensemble: &BrownianEnsemble) -> Result<Array3<f64>> {
        let dim = self.profile.first().map_or(0, Vec::len);
        if self.profile.len() != ensemble.cfg().steps {
            return Err(Error::DimensionMismatch {
                context: "deterministic profile",
                expected: ensemble.cfg().steps,
                actual: self.profile.len(),
            });
        }
        let mut values = Array3::zeros((ensemble.scenarios(), self.profile.len(), dim));
        for p in 0..ensemble.scenarios() {
            for (m, row) in self.profile.iter().enumerate() {
                for (k, v) in row.iter().enumerate() {
                    values[(p, m, k)] = *v;
                }
            }
        }
        Ok(values)
    }

    fn value_dim(&self) -> usize {
        self.profile.first().map_or(0, Vec::len)
    }
}

struct LinearCombination {
    terms: Vec<(f64, Arc<dyn CausalEvaluator>)>,
    dim: usize,
}

impl CausalEvaluator for LinearCombination {
    fn evaluate(&self, ensemble: &BrownianEnsemble) -> Result<Array3<f64>> {
        let mut out: Option<Array3<f64>> = None;
        for (w, eval) in &self.terms {
            let v = eval.evaluate(ensemble)?;
            match &mut out {
                None => {
                    let mut v = v;
                    v.mapv_inplace(|x| x * w);
                    out = Some(v);
                }
                Some(acc) => acc.scaled_add(*w, &v),
            }
        }
        out.ok_or(Error::EmptyInput("linear combination"))
    }

    fn value_dim(&self) -> usize {
        self.dim
    }
}

// ---------------------------------------------------------------------------
// Inner products and norms
// ---------------------------------------------------------------------------

/// Monte-Carlo estimate of `E[int_0^T u.v dt]`: `(1/P) sum_p sum_m u.v dt`.
pub fn inner_product(u: &AdaptedProcess, v: &AdaptedProcess) -> Result<f64> {
    Ok(inner_product_with_se(u, v)?.0)
}

/// Inner product together with the standard error of the Monte-Carlo mean.
pub fn inner_product_with_se(u: &AdaptedProcess, v: &AdaptedProcess) -> Result<(f64, f64)> {
    u.check_compatible(v)?;
    let contributions = scenario_inner_products(u, v)?;
    Ok(mean_and_se(&contributions))
}

/// Per-scenario time integrals `sum_m u.v dt`; their mean is the inner
/// product and their spread yields the Monte-Carlo standard error.
pub fn scenario_inner_products(u: &AdaptedProcess, v: &AdaptedProcess) -> Result<Vec<f64>> {
    u.check_compatible(v)?;
    let dt = u.cfg.dt();
    let (p_count, steps, dim) = (u.scenarios(), u.steps(), u.value_dim());
    let a = u.values.as_slice().expect("standard layout");
    let b = v.values.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(p_count);
    for p in 0..p_count {
        let row = &a[p * steps * dim..(p + 1) * steps * dim];
        let col = &b[p * steps * dim..(p + 1) * steps * dim];
        let mut acc = 0.0;
        for (x, y) in row.iter().zip(col) {
            acc += x * y;
        }
        out.push(acc * dt);
    }
    Ok(out)
}

pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn norm(u: &AdaptedProcess) -> Result<f64> {
    Ok(inner_product(u, u)?.max(0.0).sqrt())
}

// ---------------------------------------------------------------------------
// Projection basis and encoder
// ---------------------------------------------------------------------------

/// Per-ensemble cache of a basis evaluation, exploiting the rank-one
/// structure `s(p, m) = chi(p) * psi(m)` of every element.
pub struct BasisEvaluation {
    pub chaos: Vec<Vec<f64>>,
    pub profile: Vec<Vec<f64>>,
    gram: RefCell<Option<Rc<Vec<f64>>>>,
}

impl BasisEvaluation {
    /// Empirical Gram matrix of the cached elements (row-major n x n).
    pub fn gram(&self, dt: f64) -> Rc<Vec<f64>> {
        if let Some(g) = self.gram.borrow().as_ref() {
            return Rc::clone(g);
        }
        let n = self.chaos.len();
        let p_count = self.chaos.first().map_or(0, Vec::len);
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let time: f64 = self
                    .profile[i]
                    .iter()
                    .zip(&self.profile[j])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * dt;
                let value = if time == 0.0 {
                    0.0
                } else {
                    let mut acc = 0.0;
                    for p in 0..p_count {
                        acc += self.chaos[i][p] * self.chaos[j][p];
                    }
                    time * acc / p_count as f64
                };
                g[i * n + j] = value;
                g[j * n + i] = value;
            }
        }
        let rc = Rc::new(g);
        *self.gram.borrow_mut() = Some(Rc::clone(&rc));
        rc
    }
}

/// A truncation `{s_i}` of the fixed enumeration with cached evaluations.
pub struct ProjectionBasis {
    elements: Vec<BasisElement>,
    cache: RefCell<HashMap<EnsembleKey, Rc<BasisEvaluation>>>,
}

impl ProjectionBasis {
    pub fn new(elements: Vec<BasisElement>) -> Result<Self> {
        if elements.windows(2).any(|w| w[0].linear_rank >= w[1].linear_rank) {
            return Err(Error::GridMisaligned(
                "projection basis ranks must be strictly increasing".into(),
            ));
        }
        Ok(Self {
            elements,
            cache: RefCell::new(HashMap::new()),
        })
    }

    /// The first `count` elements of the enumeration.
    pub fn leading(count: usize, cfg: &HorizonConfig) -> Self {
        Self::new(crate::chaos::basis_elements(count, cfg)).expect("ranks increasing")
    }

    pub fn elements(&self) -> &[BasisElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn evaluation(&self, ensemble: &BrownianEnsemble) -> Result<Rc<BasisEvaluation>> {
        let key = ensemble.key();
        if let Some(hit) = self.cache.borrow().get(&key) {
            return Ok(Rc::clone(hit));
        }
        let mut chaos = Vec::with_capacity(self.elements.len());
        let mut profile = Vec::with_capacity(self.elements.len());
        for e in &self.elements {
            chaos.push(e.chaos_values(ensemble)?);
            profile.push(e.time_profile(ensemble.cfg())?);
        }
        let eval = Rc::new(BasisEvaluation {
            chaos,
            profile,
            gram: RefCell::new(None),
        });
        self.cache.borrow_mut().insert(key, Rc::clone(&eval));
        Ok(eval)
    }

    /// Materialize element `i` as a process on the ensemble.
    pub fn process(&self, i: usize, ensemble: &BrownianEnsemble) -> Result<AdaptedProcess> {
        crate::chaos::evaluate_basis(&self.elements[i], ensemble)
    }
}

/// Basis coefficients of `u`: the encoder is exactly this coefficient map.
pub fn encode(
    u: &AdaptedProcess,
    basis: &ProjectionBasis,
    ensemble: &BrownianEnsemble,
) -> Result<Vec<f64>> {
    if u.ensemble_key() != ensemble.key() {
        return Err(Error::EnsembleMismatch);
    }
    if u.value_dim() != 1 {
        return Err(Error::DimensionMismatch {
            context: "encode expects scalar processes",
            expected: 1,
            actual: u.value_dim(),
        });
    }
    let eval = basis.evaluation(ensemble)?;
    let dt = u.cfg.dt();
    let (p_count, steps) = (u.scenarios(), u.steps());
    let data = u.values.as_slice().expect("standard layout");
    let mut coeffs = Vec::with_capacity(basis.len());
    for i in 0..basis.len() {
        let psi = &eval.profile[i];
        let chi = &eval.chaos[i];
        let mut acc = 0.0;
        for p in 0..p_count {
            let row = &data[p * steps..(p + 1) * steps];
            let mut time_sum = 0.0;
            for (m, psi_m) in psi.iter().enumerate() {
                if *psi_m != 0.0 {
                    time_sum += row[m] * psi_m;
                }
            }
            acc += chi[p] * time_sum;
        }
        coeffs.push(acc * dt / p_count as f64);
    }
    Ok(coeffs)
}

/// Orthogonal projection of `u` onto the span of the basis: coefficients
/// plus the reconstructed process.
pub fn project(
    u: &AdaptedProcess,
    basis: &ProjectionBasis,
    ensemble: &BrownianEnsemble,
) -> Result<(Vec<f64>, AdaptedProcess)> {
    let coeffs = encode(u, basis, ensemble)?;
    let reconstruction = combine(basis, &coeffs, ensemble)?;
    Ok((coeffs, reconstruction))
}

/// `sum_i coeffs_i s_i` on the ensemble, causal by construction.
pub fn combine(
    basis: &ProjectionBasis,
    coeffs: &[f64],
    ensemble: &BrownianEnsemble,
) -> Result<AdaptedProcess> {
    if coeffs.len() != basis.len() {
        return Err(Error::DimensionMismatch {
            context: "combination coefficients",
            expected: basis.len(),
            actual: coeffs.len(),
        });
    }
    let evaluator: Vec<(f64, Arc<dyn CausalEvaluator>)> = basis
        .elements()
        .iter()
        .zip(coeffs)
        .map(|(e, c)| (*c, Arc::new(e.clone()) as Arc<dyn CausalEvaluator>))
        .collect();
    // reuse the cached rank-one evaluation instead of re-walking scenarios
    let eval = basis.evaluation(ensemble)?;
    let (p_count, steps) = (ensemble.scenarios(), ensemble.cfg().steps);
    let mut values = Array3::zeros((p_count, steps, 1));
    for (i, c) in coeffs.iter().enumerate() {
        if *c == 0.0 {
            continue;
        }
        let psi = &eval.profile[i];
        let chi = &eval.chaos[i];
        for p in 0..p_count {
            let scale = c * chi[p];
            for (m, psi_m) in psi.iter().enumerate() {
                if *psi_m != 0.0 {
                    values[(p, m, 0)] += scale * psi_m;
                }
            }
        }
    }
    Ok(AdaptedProcess {
        values,
        provenance: Provenance::Causal(Arc::new(LinearCombination {
            terms: evaluator,
            dim: 1,
        })),
        key: ensemble.key(),
        cfg: *ensemble.cfg(),
    })
}

// ---------------------------------------------------------------------------
// Adaptedness check
// ---------------------------------------------------------------------------

/// Re-run the process evaluator on ensembles whose increments at index
/// `>= m*` are resampled, for each probe `m*`; the process is adapted iff
/// the values at steps `<= m*` are bit-identical every time.
///
/// Probes default to the dyadic set `{1, 2, 4, ..., M}`.
pub fn check_adapted(
    u: &AdaptedProcess,
    ensemble: &BrownianEnsemble,
    probes: Option<&[usize]>,
) -> Result<bool> {
    let evaluator = match &u.provenance {
        Provenance::Causal(e) => e,
        Provenance::Unchecked => return Err(Error::NotCheckable),
    };
    if u.ensemble_key() != ensemble.key() {
        return Err(Error::EnsembleMismatch);
    }
    let steps = u.steps();
    let default_probes: Vec<usize> = {
        let mut v = vec![1];
        let mut m = 2;
        while m <= steps {
            v.push(m);
            m *= 2;
        }
        v
    };
    let probes = probes.unwrap_or(&default_probes);
    for (round, &m_star) in probes.iter().enumerate() {
        let alt_seed = splitmix64(ensemble.seed() ^ (0xabcd_0001 + round as u64));
        let tampered = ensemble.resampled_from(m_star, alt_seed);
        let resampled = evaluator.evaluate(&tampered)?;
        let until = m_star.min(steps - 1);
        for p in 0..u.scenarios() {
            for m in 0..=until {
                for k in 0..u.value_dim() {
                    if resampled[(p, m, k)].to_bits() != u.values[(p, m, k)].to_bits() {
                        return Ok(false);
                    }
                }
            }
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Columnar export
// ---------------------------------------------------------------------------

/// Write `(scenario, step, component, value)` rows.
pub fn write_columnar<W: Write>(u: &AdaptedProcess, mut w: W) -> Result<()> {
    writeln!(w, "scenario,step,component,value")?;
    for p in 0..u.scenarios() {
        for m in 0..u.steps() {
            for k in 0..u.value_dim() {
                writeln!(w, "{},{},{},{}", p, m, k, u.values[(p, m, k)])?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaos::basis_element;

    fn setup() -> (HorizonConfig, BrownianEnsemble) {
        let cfg = HorizonConfig::new(1.0, 64, 1).unwrap();
        let e = BrownianEnsemble::new(cfg, 512, 11);
        (cfg, e)
    }

    #[test]
    fn constant_inner_product_is_exact() {
        let (_, e) = setup();
        let two = AdaptedProcess::constant(&[2.0], &e);
        assert!((inner_product(&two, &two).unwrap() - 4.0).abs() < 1e-12);
        let zero = AdaptedProcess::zero(1, &e);
        assert_eq!(inner_product(&two, &zero).unwrap(), 0.0);
        let three = AdaptedProcess::constant(&[3.0], &e);
        assert!((norm(&three).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(norm(&zero).unwrap(), 0.0);
    }

    #[test]
    fn cross_ensemble_comparison_rejected() {
        let (cfg, e) = setup();
        let other = BrownianEnsemble::new(cfg, 512, 12);
        let a = AdaptedProcess::constant(&[1.0], &e);
        let b = AdaptedProcess::constant(&[1.0], &other);
        assert!(matches!(
            inner_product(&a, &b),
            Err(Error::EnsembleMismatch)
        ));
    }

    #[test]
    fn projection_recovers_basis_coefficients() {
        let (cfg, e) = setup();
        let basis = ProjectionBasis::leading(6, &cfg);
        let s1 = basis.process(0, &e).unwrap();
        let u = AdaptedProcess::linear_combination(&[(2.0, &s1)]).unwrap();
        let (coeffs, recon) = project(&u, &basis, &e).unwrap();
        assert!((coeffs[0] - 2.0).abs() < 1e-10, "coeffs {coeffs:?}");
        for c in &coeffs[1..] {
            assert!(c.abs() < 0.2, "spurious coefficient {c}");
        }
        let diff = AdaptedProcess::linear_combination(&[(1.0, &u), (-1.0, &recon)]).unwrap();
        assert!(norm(&diff).unwrap() < 0.3);
        // idempotence of the coefficient map
        let coeffs2 = encode(&recon, &basis, &e).unwrap();
        for (a, b) in coeffs.iter().zip(&coeffs2) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_matches_plain_inner_products() {
        let (cfg, e) = setup();
        let basis = ProjectionBasis::leading(8, &cfg);
        let u = basis.process(7, &e).unwrap();
        let coeffs = encode(&u, &basis, &e).unwrap();
        for (i, c) in coeffs.iter().enumerate() {
            let s = basis.process(i, &e).unwrap();
            let ip = inner_product(&u, &s).unwrap();
            assert!((c - ip).abs() < 1e-10);
        }
    }

    #[test]
    fn deterministic_control_is_adapted() {
        let (_, e) = setup();
        let u = AdaptedProcess::constant(&[1.5], &e);
        assert!(check_adapted(&u, &e, None).unwrap());
    }

    #[test]
    fn anticipating_control_fails_check() {
        struct TerminalValue;
        impl CausalEvaluator for TerminalValue {
            fn evaluate(&self, ensemble: &BrownianEnsemble) -> Result<Array3<f64>> {
                let steps = ensemble.cfg().steps;
                let mut v = Array3::zeros((ensemble.scenarios(), steps, 1));
                for p in 0..ensemble.scenarios() {
                    let w_t = ensemble.node_path(p)[steps];
                    for m in 0..steps {
                        v[(p, m, 0)] = w_t;
                    }
                }
                Ok(v)
            }
            fn value_dim(&self) -> usize {
                1
            }
        }
        let (_, e) = setup();
        let u = AdaptedProcess::from_causal(Arc::new(TerminalValue), &e).unwrap();
        assert!(!check_adapted(&u, &e, None).unwrap());
    }

    #[test]
    fn unchecked_provenance_not_checkable() {
        let (_, e) = setup();
        let raw = Array3::zeros((512, 64, 1));
        let u = AdaptedProcess::from_raw(raw, &e).unwrap();
        assert!(matches!(
            check_adapted(&u, &e, None),
            Err(Error::NotCheckable)
        ));
    }

    #[test]
    fn every_leading_basis_element_is_adapted() {
        let (cfg, e) = setup();
        for rank in 0..16 {
            let elem = basis_element(rank, &cfg);
            let u = crate::chaos::evaluate_basis(&elem, &e).unwrap();
            assert!(
                check_adapted(&u, &e, None).unwrap(),
                "element {rank} failed adaptedness"
            );
        }
    }

    #[test]
    fn columnar_export_shape() {
        let (cfg, _) = setup();
        let e = BrownianEnsemble::new(cfg, 2, 1);
        let u = AdaptedProcess::constant(&[1.0], &e);
        let mut buf = Vec::new();
        write_columnar(&u, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("scenario,step,component,value\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 64);
    }
}
