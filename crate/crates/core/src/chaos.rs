//! Orthonormal family of simple adapted processes: Haar wavelets in time
//! multiplied by Wiener-chaos functionals in space.
//!
//! A basis element is
//!
//! ```text
//! s(t, w) = psi_{s1,s2}(t) * prod_l  sqrt(deg_l!) * h_{deg_l}(xi_l)
//! ```
//!
//! where `psi_{s1,s2}` is the L^2-normalized Haar wavelet supported on
//! `[T s2/2^s1, T (s2+1)/2^s1)`, each `xi_l` is the Wiener integral of a
//! normalized Haar wavelet in "space" (an exact signed sum of Brownian
//! increments, standard normal by construction), and `h_i = He_i / i!` are
//! the Rodrigues-normalized Hermite polynomials. Every space direction must
//! be supported before the time wavelet activates, which makes the random
//! factor measurable at activation time and the element predictable on the
//! grid.
//!
//! No iterated stochastic integrals are ever simulated: products of Hermite
//! polynomials of one-dimensional Wiener integrals realize the chaos.

use std::sync::Arc;

use crate::brownian::BrownianEnsemble;
use crate::error::{Error, Result};
use crate::grid::HorizonConfig;
use crate::process::{AdaptedProcess, CausalEvaluator};

// ---------------------------------------------------------------------------
// Hermite polynomials
// ---------------------------------------------------------------------------

/// `h_i(x) = He_i(x) / i!` via the stable three-term recurrence
/// `(i+1) h_{i+1}(x) = x h_i(x) - h_{i-1}(x)`, `h_0 = 1`, `h_1(x) = x`.
pub fn hermite(i: u32, x: f64) -> f64 {
    match i {
        0 => 1.0,
        1 => x,
        _ => {
            let mut prev = 1.0;
            let mut cur = x;
            for n in 1..i {
                let next = (x * cur - prev) / (n as f64 + 1.0);
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

// ---------------------------------------------------------------------------
// Index types
// ---------------------------------------------------------------------------

/// Dyadic scale/shift pair addressing one Haar wavelet.
///
/// The wavelet at `(scale, shift)` is supported on
/// `[T shift / 2^scale, T (shift+1) / 2^scale)`, positive on the first half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HaarIndex {
    pub scale: u32,
    pub shift: u32,
}

impl HaarIndex {
    pub fn new(scale: u32, shift: u32) -> Result<Self> {
        if u64::from(shift) + 1 > 1u64 << scale {
            return Err(Error::GridMisaligned(format!(
                "haar shift {shift} out of range at scale {scale}"
            )));
        }
        Ok(Self { scale, shift })
    }

    /// Fraction of the horizon at which the wavelet support begins.
    pub fn start_fraction(&self) -> f64 {
        self.shift as f64 / (1u64 << self.scale) as f64
    }

    /// Support endpoint check `(shift+1)/2^scale <= s2/2^s1` done in exact
    /// integer arithmetic.
    pub fn ends_before_start_of(&self, time: &HaarIndex) -> bool {
        // (shift+1) / 2^scale <= t.shift / 2^t.scale
        (u128::from(self.shift) + 1) << time.scale <= u128::from(time.shift) << self.scale
    }

    /// First grid step inside the support, given `M` grid steps.
    pub fn start_step(&self, steps: usize) -> usize {
        steps * self.shift as usize / (1usize << self.scale)
    }
}

/// Normalized wavelet value at time `t`.
///
/// The printed raw amplitude `2^s1` would give `int psi^2 = 2^s1 T`; the
/// normalizing amplitude `2^{s1/2} / sqrt(T)` is used instead so the family
/// has unit norms.
pub fn haar_eval(idx: HaarIndex, t: f64, horizon: f64) -> Result<f64> {
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::TimeOutOfRange { t, horizon });
    }
    let cells = (1u64 << idx.scale) as f64;
    let left = horizon * idx.shift as f64 / cells;
    let mid = horizon * (2.0 * idx.shift as f64 + 1.0) / (2.0 * cells);
    let right = horizon * (idx.shift as f64 + 1.0) / cells;
    // cells = 2^scale, so this is the normalizing amplitude 2^{scale/2}/sqrt(T)
    let amp = cells.sqrt() / horizon.sqrt();
    if t >= left && t < mid {
        Ok(amp)
    } else if t >= mid && t < right {
        Ok(-amp)
    } else {
        Ok(0.0)
    }
}

/// One chaos factor: a Hermite polynomial of given degree applied to the
/// Wiener integral of one space direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChaosFactor {
    pub direction: HaarIndex,
    pub degree: u32,
}

/// Multi-index of chaos factors over pairwise distinct space directions.
/// The empty index is the deterministic factor 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChaosIndex {
    factors: Vec<ChaosFactor>,
}

impl ChaosIndex {
    pub fn empty() -> Self {
        Self {
            factors: Vec::new(),
        }
    }

    pub fn new(mut factors: Vec<ChaosFactor>) -> Result<Self> {
        for f in &factors {
            if f.degree == 0 {
                return Err(Error::GridMisaligned(
                    "chaos factor degrees must be positive".into(),
                ));
            }
        }
        factors.sort_by_key(|f| f.direction);
        if factors.windows(2).any(|w| w[0].direction == w[1].direction) {
            return Err(Error::GridMisaligned(
                "chaos directions must be pairwise distinct".into(),
            ));
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[ChaosFactor] {
        &self.factors
    }

    pub fn total_degree(&self) -> u32 {
        self.factors.iter().map(|f| f.degree).sum()
    }

    pub fn max_scale(&self) -> u32 {
        self.factors
            .iter()
            .map(|f| f.direction.scale)
            .max()
            .unwrap_or(0)
    }

    /// True iff every space direction is supported before `time` activates.
    pub fn compatible_with(&self, time: &HaarIndex) -> bool {
        self.factors
            .iter()
            .all(|f| f.direction.ends_before_start_of(time))
    }
}

// ---------------------------------------------------------------------------
// Chaos evaluation
// ---------------------------------------------------------------------------

fn check_direction_on_grid(dir: HaarIndex, cfg: &HorizonConfig) -> Result<()> {
    if 1usize << (dir.scale + 1) > cfg.steps {
        return Err(Error::GridMisaligned(format!(
            "direction at scale {} needs at least {} grid steps, have {}",
            dir.scale,
            1usize << (dir.scale + 1),
            cfg.steps
        )));
    }
    Ok(())
}

/// Wiener integral of the normalized wavelet `psi_dir` over one scenario:
/// an exact signed sum of Brownian increments, standard normal in law.
pub fn wiener_integral(dir: HaarIndex, ensemble: &BrownianEnsemble, scenario: usize) -> Result<f64> {
    let cfg = ensemble.cfg();
    if cfg.brownian_dim != 1 {
        return Err(Error::GridMisaligned(
            "chaos directions require a one-dimensional Brownian ensemble".into(),
        ));
    }
    check_direction_on_grid(dir, cfg)?;
    let steps = cfg.steps;
    let cells = 1usize << dir.scale;
    let left = steps * dir.shift as usize / cells;
    let half = steps / (2 * cells);
    let amp = ((cells as f64).sqrt()) / cfg.horizon.sqrt();
    let mut pos = 0.0;
    let mut neg = 0.0;
    for m in left..left + half {
        pos += ensemble.increment(scenario, m, 0);
    }
    for m in left + half..left + 2 * half {
        neg += ensemble.increment(scenario, m, 0);
    }
    Ok(amp * (pos - neg))
}

/// Evaluate the normalized chaos functional for one scenario:
/// product over factors of `sqrt(deg!) * h_deg(xi_dir)`.
pub fn chaos_value(idx: &ChaosIndex, ensemble: &BrownianEnsemble, scenario: usize) -> Result<f64> {
    let mut out = 1.0;
    for f in idx.factors() {
        let xi = wiener_integral(f.direction, ensemble, scenario)?;
        out *= factorial(f.degree).sqrt() * hermite(f.degree, xi);
    }
    Ok(out)
}

/// Which product structure realizes the random factor.
///
/// `Tensor` is the normative form used throughout the crate (distinct space
/// directions, one Hermite factor each). `SingleArgument` is the literal
/// product `h_1(xi) ... h_j(xi)` of one Gaussian argument, kept only for
/// experimentation; it carries no orthonormality guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChaosForm {
    Tensor,
    SingleArgument,
}

/// Evaluate a chaos functional under the chosen product structure. For
/// `SingleArgument` the index must have exactly one factor `(dir, j)` and the
/// value is `prod_{l=1..j} h_l(xi_dir)` without variance normalization.
pub fn chaos_value_with_form(
    idx: &ChaosIndex,
    form: ChaosForm,
    ensemble: &BrownianEnsemble,
    scenario: usize,
) -> Result<f64> {
    match form {
        ChaosForm::Tensor => chaos_value(idx, ensemble, scenario),
        ChaosForm::SingleArgument => {
            if idx.factors().len() != 1 {
                return Err(Error::GridMisaligned(
                    "single-argument form needs exactly one (direction, degree) pair".into(),
                ));
            }
            let f = idx.factors()[0];
            let xi = wiener_integral(f.direction, ensemble, scenario)?;
            Ok((1..=f.degree).map(|l| hermite(l, xi)).product())
        }
    }
}

// ---------------------------------------------------------------------------
// Basis elements and their enumeration
// ---------------------------------------------------------------------------

/// One element of the orthonormal family, addressed by its position in the
/// fixed enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisElement {
    pub time_index: HaarIndex,
    pub chaos_index: ChaosIndex,
    /// Scalar turning the raw printed product (amplitude-`2^s1` wavelet,
    /// plain `h_deg` factors of standardized arguments) into the unit-norm
    /// element: `2^{-s1/2} / sqrt(T) * prod sqrt(deg!)`.
    pub norm_constant: f64,
    pub linear_rank: usize,
}

impl BasisElement {
    /// Wavelet values at the left endpoints of the `M` grid cells.
    pub fn time_profile(&self, cfg: &HorizonConfig) -> Result<Vec<f64>> {
        if 1usize << (self.time_index.scale + 1) > cfg.steps {
            return Err(Error::GridMisaligned(format!(
                "time wavelet at scale {} does not fit a {}-step grid",
                self.time_index.scale, cfg.steps
            )));
        }
        (0..cfg.steps)
            .map(|m| haar_eval(self.time_index, cfg.node(m), cfg.horizon))
            .collect()
    }

    /// Chaos factor per scenario.
    pub fn chaos_values(&self, ensemble: &BrownianEnsemble) -> Result<Vec<f64>> {
        (0..ensemble.scenarios())
            .map(|p| chaos_value(&self.chaos_index, ensemble, p))
            .collect()
    }
}

/// Key ordering the enumeration. The degree enters the primary key so that
/// every key class is finite; within a class lower resolution comes first,
/// then the lexicographic encoding of the indices.
fn element_key(time: &HaarIndex, chaos: &ChaosIndex) -> (u32, u32, Vec<u32>) {
    let resolution = time.scale + chaos.max_scale();
    let degree = chaos.total_degree();
    let mut code = vec![time.scale, time.shift];
    for f in chaos.factors() {
        code.extend_from_slice(&[f.direction.scale, f.direction.shift, f.degree]);
    }
    (resolution + degree, resolution, code)
}

/// All valid chaos indices over the given directions with total degree
/// exactly `degree` and maximal direction scale exactly `max_scale`.
fn chaos_indices_with(
    directions: &[HaarIndex],
    degree: u32,
    max_scale: u32,
    start: usize,
    current: &mut Vec<ChaosFactor>,
    out: &mut Vec<ChaosIndex>,
) {
    if degree == 0 {
        if current.iter().any(|f| f.direction.scale == max_scale) {
            out.push(ChaosIndex::new(current.clone()).expect("distinct by construction"));
        }
        return;
    }
    for (offset, dir) in directions[start..].iter().enumerate() {
        for deg in 1..=degree {
            current.push(ChaosFactor {
                direction: *dir,
                degree: deg,
            });
            chaos_indices_with(
                directions,
                degree - deg,
                max_scale,
                start + offset + 1,
                current,
                out,
            );
            current.pop();
        }
    }
}

/// The first `count` index pairs of the fixed enumeration.
pub fn enumerate_indices(count: usize) -> Vec<(HaarIndex, ChaosIndex)> {
    let mut out: Vec<(HaarIndex, ChaosIndex)> = Vec::with_capacity(count);
    let mut primary = 0u32;
    while out.len() < count {
        let mut bucket: Vec<(HaarIndex, ChaosIndex)> = Vec::new();
        // primary = (s1 + max space scale) + total degree
        for resolution in 0..=primary {
            let degree = primary - resolution;
            for s1 in 0..=resolution {
                let space_max = resolution - s1;
                if degree == 0 && space_max != 0 {
                    continue;
                }
                for s2 in 0..(1u32 << s1) {
                    let time = HaarIndex::new(s1, s2).expect("shift in range");
                    if degree == 0 {
                        bucket.push((time, ChaosIndex::empty()));
                        continue;
                    }
                    let mut directions = Vec::new();
                    for i in 0..=space_max {
                        for k in 0..(1u32 << i) {
                            let dir = HaarIndex::new(i, k).expect("shift in range");
                            if dir.ends_before_start_of(&time) {
                                directions.push(dir);
                            }
                        }
                    }
                    let mut current = Vec::new();
                    let mut found = Vec::new();
                    chaos_indices_with(
                        &directions,
                        degree,
                        space_max,
                        0,
                        &mut current,
                        &mut found,
                    );
                    bucket.extend(found.into_iter().map(|c| (time, c)));
                }
            }
        }
        bucket.sort_by(|a, b| element_key(&a.0, &a.1).cmp(&element_key(&b.0, &b.1)));
        out.extend(bucket);
        primary += 1;
    }
    out.truncate(count);
    out
}

/// The `rank`-th element of the fixed enumeration, normalized for the given
/// horizon. Deterministic: depends on `(rank, cfg)` only.
pub fn basis_element(rank: usize, cfg: &HorizonConfig) -> BasisElement {
    let (time_index, chaos_index) = enumerate_indices(rank + 1).pop().expect("nonempty");
    let chaos_norm: f64 = chaos_index
        .factors()
        .iter()
        .map(|f| factorial(f.degree).sqrt())
        .product();
    let norm_constant =
        chaos_norm / ((1u64 << time_index.scale) as f64).sqrt() / cfg.horizon.sqrt();
    BasisElement {
        time_index,
        chaos_index,
        norm_constant,
        linear_rank: rank,
    }
}

/// The first `count` elements of the enumeration.
pub fn basis_elements(count: usize, cfg: &HorizonConfig) -> Vec<BasisElement> {
    (0..count).map(|r| basis_element(r, cfg)).collect()
}

impl CausalEvaluator for BasisElement {
    fn evaluate(&self, ensemble: &BrownianEnsemble) -> Result<ndarray::Array3<f64>> {
        let cfg = ensemble.cfg();
        let profile = self.time_profile(cfg)?;
        let chaos = self.chaos_values(ensemble)?;
        let mut values = ndarray::Array3::zeros((ensemble.scenarios(), cfg.steps, 1));
        for (p, chi) in chaos.iter().enumerate() {
            for (m, psi) in profile.iter().enumerate() {
                values[(p, m, 0)] = psi * chi;
            }
        }
        Ok(values)
    }

    fn value_dim(&self) -> usize {
        1
    }
}

/// Evaluate a basis element into a scalar adapted process on the ensemble.
pub fn evaluate_basis(elem: &BasisElement, ensemble: &BrownianEnsemble) -> Result<AdaptedProcess> {
    AdaptedProcess::from_causal(Arc::new(elem.clone()), ensemble)
}
