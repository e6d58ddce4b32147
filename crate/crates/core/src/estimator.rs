//! Moment-based estimators of the impact matrix `B`.
//!
//! * GMM: `g(B)' W g(B)`
//! * CSUE: the same with each condition rescaled by `D̂(B)`, the product of
//!   inverse innovation standard deviations matching its power vector; two
//!   steps (`W = I`, then the efficient `Ŵ` at the step-1 solution)
//! * Ridge CSUE: CSUE plus `λ Σ v_ij t_ij²` over restricted pairs, with
//!   `t = B` (B-type) or `t = B^{-1}` (A-type)
//!
//! All objectives come with exact gradients; minimization uses [`crate::optim`].

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvarError};
use crate::labeling::{project_to_representative, LabelingAnchor, SignPermutation};
use crate::moments::{
    efficient_weight_matrix_of, fill_powers, guarded_inverse, innovation_pass, normal_variance_weights, row_major,
    scaling_entry, MomentSet, ResidualSample, WeightMatrix, DEGENERATE_PENALTY,
};
use crate::optim::{minimize, OptimOptions};

/// Joint threshold on `nG_j² + min₂(nG)²` below which a weight is infinite.
pub const GAUSSIAN_CLAMP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestrictionTarget {
    BMatrix,
    AMatrix,
}

/// Zero restrictions on `B` or on `A = B^{-1}`. Pairs are zero-based `(row, column)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictionSet {
    pub target: RestrictionTarget,
    pairs: Vec<(usize, usize)>,
    pub description: String,
}

impl RestrictionSet {
    pub fn new(
        n: usize,
        target: RestrictionTarget,
        pairs: impl IntoIterator<Item = (usize, usize)>,
        description: impl Into<String>,
    ) -> Result<Self> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for (i, j) in pairs {
            if i >= n || j >= n {
                return Err(SvarError::Invalid(format!(
                    "restriction ({}, {}) is outside a {n}×{n} matrix",
                    i + 1,
                    j + 1
                )));
            }
            if i == j {
                return Err(SvarError::Invalid(format!(
                    "diagonal element ({}, {}) cannot be restricted",
                    i + 1,
                    j + 1
                )));
            }
            if out.contains(&(i, j)) {
                return Err(SvarError::Invalid(format!(
                    "restriction ({}, {}) listed twice",
                    i + 1,
                    j + 1
                )));
            }
            out.push((i, j));
        }
        Ok(Self {
            target,
            pairs: out,
            description: description.into(),
        })
    }

    /// Same as [`new`](Self::new) with one-based pairs.
    pub fn from_one_based(
        n: usize,
        target: RestrictionTarget,
        pairs: impl IntoIterator<Item = (usize, usize)>,
        description: impl Into<String>,
    ) -> Result<Self> {
        let shifted: Vec<(usize, usize)> = pairs
            .into_iter()
            .map(|(i, j)| {
                if i == 0 || j == 0 {
                    Err(SvarError::Invalid("one-based indices start at 1".into()))
                } else {
                    Ok((i - 1, j - 1))
                }
            })
            .collect::<Result<_>>()?;
        Self::new(n, target, shifted, description)
    }

    pub fn empty(target: RestrictionTarget) -> Self {
        Self {
            target,
            pairs: Vec::new(),
            description: "none".into(),
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, pair: (usize, usize)) -> bool {
        self.pairs.contains(&pair)
    }

    /// Subset keeping only the pairs for which `keep` holds.
    pub fn retain(&self, mut keep: impl FnMut((usize, usize)) -> bool) -> Self {
        Self {
            target: self.target,
            pairs: self.pairs.iter().copied().filter(|&p| keep(p)).collect(),
            description: self.description.clone(),
        }
    }

    /// The restricted elements of `b` (B-type) or of `b^{-1}` (A-type).
    pub fn targeted_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self.target {
            RestrictionTarget::BMatrix => Ok(b.clone()),
            RestrictionTarget::AMatrix => b
                .clone()
                .try_inverse()
                .ok_or(SvarError::Singular { det: b.determinant().abs() }),
        }
    }
}

impl fmt::Display for RestrictionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = match self.target {
            RestrictionTarget::BMatrix => "b",
            RestrictionTarget::AMatrix => "a",
        };
        let list: Vec<String> = self.pairs.iter().map(|(i, j)| format!("{m}{}{}", i + 1, j + 1)).collect();
        write!(f, "{} [{}]", self.description, list.join(", "))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveWeight {
    pub pair: (usize, usize),
    /// `f64::INFINITY` marks an element held at zero.
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveWeights {
    pub target: RestrictionTarget,
    pub weights: Vec<AdaptiveWeight>,
    pub first_step_b: DMatrix<f64>,
    /// `S_j²/6 + (K_j - 3)²/24` per shock.
    pub ng: DVector<f64>,
}

impl AdaptiveWeights {
    pub fn get(&self, pair: (usize, usize)) -> Option<f64> {
        self.weights.iter().find(|w| w.pair == pair).map(|w| w.weight)
    }

    pub fn restricted_to(&self, rs: &RestrictionSet) -> Self {
        Self {
            weights: self.weights.iter().filter(|w| rs.contains(w.pair)).cloned().collect(),
            ..self.clone()
        }
    }
}

/// `(1/b²)(1 + 1/(nG_j² + min₂²))`, infinite when `b = 0` or the shock pair looks Gaussian.
pub fn adaptive_weight(b: f64, ng_j: f64, min2: f64) -> f64 {
    let gauss = ng_j * ng_j + min2 * min2;
    if b == 0.0 || gauss < GAUSSIAN_CLAMP_TOL {
        f64::INFINITY
    } else {
        (1.0 / (b * b)) * (1.0 + 1.0 / gauss)
    }
}

/// Skewness and kurtosis from uncorrected central sample moments.
pub fn skewness_kurtosis(x: &[f64]) -> (f64, f64) {
    let len = x.len() as f64;
    let mean = x.iter().sum::<f64>() / len;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= len;
    m3 /= len;
    m4 /= len;
    (m3 / m2.powf(1.5), m4 / (m2 * m2))
}

/// `S²/6 + (K-3)²/24` (the Jarque-Bera statistic divided by `T`).
pub fn non_gaussianity(x: &[f64]) -> f64 {
    let (s, k) = skewness_kurtosis(x);
    s * s / 6.0 + (k - 3.0).powi(2) / 24.0
}

pub fn compute_adaptive_weights(first_step: &EstimationResult, rs: &RestrictionSet) -> Result<AdaptiveWeights> {
    let shocks = &first_step.shocks;
    if shocks.nrows() < 8 {
        return Err(SvarError::InsufficientData(format!(
            "adaptive weights need at least 8 shock observations, got {}",
            shocks.nrows()
        )));
    }
    let n = shocks.ncols();
    let ng = DVector::from_iterator(
        n,
        (0..n).map(|j| non_gaussianity(shocks.column(j).as_slice())),
    );
    let mut sorted: Vec<f64> = ng.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let min2 = sorted.get(1).copied().unwrap_or(sorted[0]);
    let target = rs.targeted_matrix(&first_step.b_hat)?;
    let weights = rs
        .pairs()
        .iter()
        .map(|&(i, j)| {
            let t = target[(i, j)];
            let weight = match rs.target {
                RestrictionTarget::BMatrix => adaptive_weight(t, ng[j], min2),
                RestrictionTarget::AMatrix if t == 0.0 => f64::INFINITY,
                RestrictionTarget::AMatrix => 1.0 / (t * t),
            };
            AdaptiveWeight { pair: (i, j), weight }
        })
        .collect();
    Ok(AdaptiveWeights {
        target: rs.target,
        weights,
        first_step_b: first_step.b_hat.clone(),
        ng,
    })
}

/// Quadratic penalty plus hard zeros.
#[derive(Debug, Clone)]
pub(crate) struct Penalty {
    pub target: RestrictionTarget,
    pub lambda: f64,
    pub entries: Vec<(usize, usize, f64)>,
    pub clamped: Vec<(usize, usize)>,
}

impl Penalty {
    pub fn ridge(aw: &AdaptiveWeights, lambda: f64) -> Self {
        let mut entries = Vec::new();
        let mut clamped = Vec::new();
        for w in &aw.weights {
            if w.weight.is_finite() {
                entries.push((w.pair.0, w.pair.1, w.weight));
            } else {
                clamped.push(w.pair);
            }
        }
        Self {
            target: aw.target,
            lambda,
            entries,
            clamped,
        }
    }

    /// Every restriction imposed exactly.
    pub fn binding(rs: &RestrictionSet) -> Self {
        Self {
            target: rs.target,
            lambda: 0.0,
            entries: Vec::new(),
            clamped: rs.pairs().to_vec(),
        }
    }

    fn value(&self, t: &DMatrix<f64>) -> f64 {
        self.lambda * self.entries.iter().map(|&(i, j, v)| v * t[(i, j)] * t[(i, j)]).sum::<f64>()
    }

    fn add_gradient(&self, t: &DMatrix<f64>, grad: &mut DMatrix<f64>) {
        for &(i, j, v) in &self.entries {
            grad[(i, j)] += 2.0 * self.lambda * v * t[(i, j)];
        }
    }
}

/// One minimization problem over `B` (or over `A = B^{-1}` for A-type penalties).
pub(crate) struct Problem<'a> {
    pub sample: &'a ResidualSample,
    pub ms: &'a MomentSet,
    pub weight: &'a DMatrix<f64>,
    /// CSUE scaling on (true) or plain GMM (false).
    pub scaled: bool,
    pub penalty: Option<&'a Penalty>,
    pub variance_penalty: bool,
}

struct Scratch {
    table: Vec<f64>,
    grad_e: Vec<f64>,
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.sample.n()
    }

    fn param_is_a(&self) -> bool {
        matches!(self.penalty, Some(p) if p.target == RestrictionTarget::AMatrix)
    }

    /// Moment part of the objective at `A` (row-major), with its gradient in `A`.
    fn core(&self, a: &[f64], grad_a: Option<&mut [f64]>, scratch: &mut Scratch) -> f64 {
        let n = self.n();
        let ms = self.ms;
        let pass = innovation_pass(a, self.sample, ms);
        if pass.second_moment.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            if let Some(g) = grad_a {
                g.fill(0.0);
            }
            return DEGENERATE_PENALTY;
        }
        let inv_sd: Vec<f64> = pass.second_moment.iter().map(|v| 1.0 / v.sqrt()).collect();
        let k = ms.len();
        let factors = ms.factors();
        let mut g = DVector::zeros(k);
        let mut d = DVector::from_element(k, 1.0);
        for c in 0..k {
            g[c] = pass.raw[c] - ms.indices()[c].target;
            if self.scaled {
                d[c] = scaling_entry(&factors[c], &inv_sd);
            }
        }
        let h = d.component_mul(&g);
        let r = self.weight * &h;
        let mut value = h.dot(&r);
        if self.variance_penalty {
            value += pass.second_moment.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / n as f64;
        }
        if !value.is_finite() {
            if let Some(g) = grad_a {
                g.fill(0.0);
            }
            return DEGENERATE_PENALTY;
        }
        let Some(grad_a) = grad_a else {
            return value;
        };

        // dJ/dg_k and dJ/dvar_i
        let dg: Vec<f64> = (0..k).map(|c| 2.0 * r[c] * d[c]).collect();
        let mut dvar = vec![0.0; n];
        if self.scaled {
            for c in 0..k {
                let b = 2.0 * r[c] * g[c] * d[c];
                let f = &factors[c];
                for l in 0..f.len {
                    dvar[f.var[l]] -= b * f.pow[l] as f64 / (2.0 * pass.second_moment[f.var[l]]);
                }
            }
        }
        if self.variance_penalty {
            for (dv, v) in dvar.iter_mut().zip(&pass.second_moment) {
                *dv += 2.0 * (v - 1.0) / n as f64;
            }
        }

        grad_a.fill(0.0);
        let Scratch { table, grad_e } = scratch;
        for t in 0..self.sample.len() {
            let e = &pass.e[t * n..(t + 1) * n];
            fill_powers(e, table);
            for i in 0..n {
                grad_e[i] = 2.0 * dvar[i] * e[i];
            }
            for (c, f) in factors.iter().enumerate() {
                let w = dg[c];
                if w == 0.0 {
                    continue;
                }
                for l in 0..f.len {
                    let mut p = f.pow[l] as f64 * table[f.var[l] * 4 + f.pow[l] - 1];
                    for l2 in 0..f.len {
                        if l2 != l {
                            p *= table[f.var[l2] * 4 + f.pow[l2]];
                        }
                    }
                    grad_e[f.var[l]] += w * p;
                }
            }
            let u = self.sample.row(t);
            for i in 0..n {
                let ge = grad_e[i];
                let row = &mut grad_a[i * n..(i + 1) * n];
                for j in 0..n {
                    row[j] += ge * u[j];
                }
            }
        }
        let inv_t = 1.0 / self.sample.len() as f64;
        grad_a.iter_mut().for_each(|v| *v *= inv_t);
        value
    }

    /// Full objective at the parameter matrix `m` (`B`, or `A` for A-type penalties).
    fn evaluate(&self, m: &DMatrix<f64>, grad: Option<&mut DMatrix<f64>>, scratch: &mut Scratch) -> f64 {
        let n = self.n();
        let want_grad = grad.is_some();
        let mut ga = vec![0.0; n * n];
        let (a, a_mat) = if self.param_is_a() {
            let det = m.determinant();
            if !(det.abs() * self.sample.det_floor() > 1e-24) {
                if let Some(g) = grad {
                    g.fill(0.0);
                }
                return DEGENERATE_PENALTY;
            }
            (row_major(m), None)
        } else {
            match guarded_inverse(m, self.sample.det_floor()) {
                Ok(inv) => (row_major(&inv), Some(inv)),
                Err(_) => {
                    if let Some(g) = grad {
                        g.fill(0.0);
                    }
                    return DEGENERATE_PENALTY;
                }
            }
        };
        let mut value = self.core(&a, want_grad.then_some(&mut ga[..]), scratch);
        if value >= DEGENERATE_PENALTY {
            if let Some(g) = grad {
                g.fill(0.0);
            }
            return value;
        }
        if let Some(p) = self.penalty {
            value += p.value(m);
        }
        if let Some(grad) = grad {
            let g_a = DMatrix::from_row_slice(n, n, &ga);
            match a_mat {
                None => grad.copy_from(&g_a),
                Some(inv) => {
                    let at = inv.transpose();
                    grad.copy_from(&(-(&at * g_a * &at)));
                }
            }
            if let Some(p) = self.penalty {
                p.add_gradient(m, grad);
            }
        }
        value
    }

    fn scratch(&self) -> Scratch {
        Scratch {
            table: vec![0.0; self.n() * 4],
            grad_e: vec![0.0; self.n()],
        }
    }

    pub fn value_at(&self, b: &DMatrix<f64>) -> f64 {
        let m = if self.param_is_a() {
            match b.clone().try_inverse() {
                Some(a) => a,
                None => return DEGENERATE_PENALTY,
            }
        } else {
            b.clone()
        };
        self.evaluate(&m, None, &mut self.scratch())
    }

    /// Objective and gradient with respect to the parameter matrix.
    #[cfg(test)]
    fn value_grad(&self, m: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let n = self.n();
        let mut g = DMatrix::zeros(n, n);
        let v = self.evaluate(m, Some(&mut g), &mut self.scratch());
        (v, g)
    }

    /// Minimize starting from `start_b`; returns the minimizing `B`.
    pub fn solve(&self, start_b: &DMatrix<f64>, opts: &OptimOptions) -> Result<Solved> {
        let n = self.n();
        let param_a = self.param_is_a();
        let start = if param_a {
            start_b
                .clone()
                .try_inverse()
                .ok_or(SvarError::Singular { det: start_b.determinant().abs() })?
        } else {
            start_b.clone()
        };
        let clamped: Vec<(usize, usize)> = self.penalty.map(|p| p.clamped.clone()).unwrap_or_default();
        let free: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|p| !clamped.contains(p))
            .collect();
        let mut m = start.clone();
        for &(i, j) in &clamped {
            m[(i, j)] = 0.0;
        }
        let x0: Vec<f64> = free.iter().map(|&(i, j)| m[(i, j)]).collect();
        let mut scratch = self.scratch();
        let mut grad = DMatrix::zeros(n, n);
        let mut work = m.clone();
        let result = minimize(
            |x: &[f64], gx: &mut [f64]| {
                for (&(i, j), &v) in free.iter().zip(x) {
                    work[(i, j)] = v;
                }
                let value = self.evaluate(&work, Some(&mut grad), &mut scratch);
                for (g, &(i, j)) in gx.iter_mut().zip(&free) {
                    *g = grad[(i, j)];
                }
                value
            },
            &x0,
            opts,
        );
        for (&(i, j), &v) in free.iter().zip(&result.x) {
            m[(i, j)] = v;
        }
        let b = if param_a {
            m.clone()
                .try_inverse()
                .ok_or(SvarError::Singular { det: m.determinant().abs() })?
        } else {
            m
        };
        if result.value >= DEGENERATE_PENALTY {
            return Err(SvarError::Singular { det: b.determinant().abs() });
        }
        Ok(Solved {
            b,
            value: result.value,
            converged: result.converged,
            iterations: result.iterations,
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Solved {
    pub b: DMatrix<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Inverse normal variances on the covariance and coskewness conditions, zero on order 4.
fn pilot_weight(ms: &MomentSet) -> DMatrix<f64> {
    let w = normal_variance_weights(ms);
    let end = ms.order_offsets()[1];
    DMatrix::from_fn(ms.len(), ms.len(), |a, b| if a == b && a < end { w[a] } else { 0.0 })
}

fn identity_weight(ms: &MomentSet) -> DMatrix<f64> {
    DMatrix::identity(ms.len(), ms.len())
}

fn check_inputs(b: &DMatrix<f64>, residuals: &DMatrix<f64>, ms: &MomentSet, w: &DMatrix<f64>) -> Result<()> {
    let n = residuals.ncols();
    if b.shape() != (n, n) || ms.n() != n || w.shape() != (ms.len(), ms.len()) {
        return Err(SvarError::Dimension(format!(
            "B {}×{}, residuals with {n} columns, {} conditions and a {}×{} weight matrix do not conform",
            b.nrows(),
            b.ncols(),
            ms.len(),
            w.nrows(),
            w.ncols()
        )));
    }
    Ok(())
}

/// `g(B)' W g(B)`; returns the degenerate penalty for near-singular `B`.
pub fn gmm_objective(b: &DMatrix<f64>, residuals: &DMatrix<f64>, ms: &MomentSet, w: &DMatrix<f64>) -> Result<f64> {
    check_inputs(b, residuals, ms, w)?;
    let sample = ResidualSample::from_matrix(residuals);
    Ok(Problem {
        sample: &sample,
        ms,
        weight: w,
        scaled: false,
        penalty: None,
        variance_penalty: false,
    }
    .value_at(b))
}

/// `g(B)' D̂(B) W D̂(B) g(B)`.
pub fn csue_objective(b: &DMatrix<f64>, residuals: &DMatrix<f64>, ms: &MomentSet, w: &DMatrix<f64>) -> Result<f64> {
    check_inputs(b, residuals, ms, w)?;
    let sample = ResidualSample::from_matrix(residuals);
    Ok(Problem {
        sample: &sample,
        ms,
        weight: w,
        scaled: true,
        penalty: None,
        variance_penalty: false,
    }
    .value_at(b))
}

/// CSUE objective plus `λ Σ v_ij t_ij²`. Infinite weights contribute nothing
/// here; those elements are held at zero by the estimators.
pub fn ridge_objective(
    b: &DMatrix<f64>,
    residuals: &DMatrix<f64>,
    ms: &MomentSet,
    w: &DMatrix<f64>,
    aw: &AdaptiveWeights,
    lambda: f64,
) -> Result<f64> {
    check_inputs(b, residuals, ms, w)?;
    if !(lambda >= 0.0) {
        return Err(SvarError::Invalid(format!("λ must be non-negative, got {lambda}")));
    }
    let sample = ResidualSample::from_matrix(residuals);
    let penalty = Penalty::ridge(aw, lambda);
    Ok(Problem {
        sample: &sample,
        ms,
        weight: w,
        scaled: true,
        penalty: Some(&penalty),
        variance_penalty: false,
    }
    .value_at(b))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationResult {
    pub b_hat: DMatrix<f64>,
    /// `e(B̂)_t` per row.
    pub shocks: DMatrix<f64>,
    pub objective: f64,
    pub lambda: Option<f64>,
    pub weights_used: Option<AdaptiveWeights>,
    pub restrictions: Option<RestrictionSet>,
    pub permutation_applied: SignPermutation,
    pub anchor: LabelingAnchor,
    pub converged: bool,
    pub boundary_flag: bool,
    /// Weight matrix of the final step.
    pub weight_matrix: WeightMatrix,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub optim: OptimOptions,
    /// Starting value; defaults to the Cholesky factor `L` of the residual second-moment matrix.
    pub start: Option<DMatrix<f64>>,
    /// Without an explicit start, step 1 runs from `L` and from a pilot fit on
    /// the order-2 and order-3 conditions started at `L`; this adds `L Q_k` for
    /// random rotations `Q_k` (and their pilot fits) to that list.
    pub rotation_starts: usize,
    pub start_seed: u64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            optim: OptimOptions::default(),
            start: None,
            rotation_starts: 0,
            start_seed: 0,
        }
    }
}

/// `count` Haar-distributed orthogonal matrices from a fixed seed.
pub fn random_rotations(n: usize, count: usize, seed: u64) -> Vec<DMatrix<f64>> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
            let qr = g.qr();
            let mut q = qr.q();
            let r = qr.r();
            for j in 0..n {
                if r[(j, j)] < 0.0 {
                    q.column_mut(j).neg_mut();
                }
            }
            q
        })
        .collect()
}

/// Lower Cholesky factor of `(1/T) Σ u_t u_t'`.
pub fn second_moment_cholesky(sample: &ResidualSample) -> Result<DMatrix<f64>> {
    let u = sample.to_matrix();
    let cov = u.transpose() * &u / sample.len() as f64;
    cholesky_lower(&cov)
}

pub fn cholesky_lower(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = cov
        .clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or(SvarError::NotPositiveDefinite)?;
    let scale = cov.diagonal().amax().sqrt();
    if l.diagonal().iter().any(|d| !(*d > 1e-6 * scale)) {
        return Err(SvarError::NotPositiveDefinite);
    }
    Ok(l)
}

fn finish(
    solved: Solved,
    sample: &ResidualSample,
    anchor: &LabelingAnchor,
    weight_matrix: WeightMatrix,
) -> Result<EstimationResult> {
    let projection = project_to_representative(&solved.b, anchor)?;
    let a = guarded_inverse(&projection.matrix, 0.0)?;
    let shocks = sample.to_matrix() * a.transpose();
    Ok(EstimationResult {
        b_hat: projection.matrix,
        shocks,
        objective: solved.value,
        lambda: None,
        weights_used: None,
        restrictions: None,
        permutation_applied: projection.sign_permutation,
        anchor: anchor.clone(),
        converged: solved.converged,
        boundary_flag: projection.boundary,
        weight_matrix,
        iterations: solved.iterations,
    })
}

fn check_sample(sample: &ResidualSample, ms: &MomentSet, anchor: &LabelingAnchor) -> Result<()> {
    if sample.n() != ms.n() || anchor.n() != sample.n() {
        return Err(SvarError::Dimension(format!(
            "residuals have {} columns, the moment set {} shocks and the anchor {} rows",
            sample.n(),
            ms.n(),
            anchor.n()
        )));
    }
    if sample.len() < 2 * ms.n() {
        return Err(SvarError::InsufficientData(format!(
            "{} residual rows for {} shocks",
            sample.len(),
            ms.n()
        )));
    }
    Ok(())
}

pub(crate) fn csue_on_sample(
    sample: &ResidualSample,
    ms: &MomentSet,
    anchor: &LabelingAnchor,
    opts: &EstimatorOptions,
) -> Result<EstimationResult> {
    check_sample(sample, ms, anchor)?;
    let starts = match &opts.start {
        Some(s) => vec![s.clone()],
        None => {
            let l = second_moment_cholesky(sample)?;
            let mut starts = vec![l.clone()];
            starts.extend(
                random_rotations(sample.n(), opts.rotation_starts, opts.start_seed)
                    .into_iter()
                    .map(|q| &l * q),
            );
            let pilot_weight = pilot_weight(ms);
            let pilot = Problem {
                sample,
                ms,
                weight: &pilot_weight,
                scaled: true,
                penalty: None,
                variance_penalty: false,
            };
            let pilots: Vec<DMatrix<f64>> = starts
                .iter()
                .filter_map(|s| pilot.solve(s, &opts.optim).ok().map(|p| p.b))
                .collect();
            starts.extend(pilots);
            starts
        }
    };
    let identity = identity_weight(ms);
    let problem = Problem {
        sample,
        ms,
        weight: &identity,
        scaled: true,
        penalty: None,
        variance_penalty: false,
    };
    let mut step1: Option<Solved> = None;
    let mut last_err = None;
    for start in &starts {
        match problem.solve(start, &opts.optim) {
            Ok(s) if step1.as_ref().is_none_or(|b| s.value < b.value) => step1 = Some(s),
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        }
    }
    let step1 = match (step1, last_err) {
        (Some(s), _) => s,
        (None, Some(e)) => return Err(e),
        (None, None) => unreachable!("at least one start"),
    };
    let weight = efficient_weight_matrix_of(&step1.b, sample, ms)?;
    let step2 = Problem {
        sample,
        ms,
        weight: &weight.matrix,
        scaled: true,
        penalty: None,
        variance_penalty: false,
    }
    .solve(&step1.b, &opts.optim)?;
    let converged = step1.converged && step2.converged;
    if !converged {
        log::warn!("CSUE optimization did not converge after restarts");
    }
    let mut out = finish(step2, sample, anchor, weight)?;
    out.converged = converged;
    Ok(out)
}

/// Two-step CSUE: `W = I`, then the efficient weight at the step-1 solution.
pub fn estimate_csue(
    residuals: &DMatrix<f64>,
    ms: &MomentSet,
    anchor: &LabelingAnchor,
    opts: &EstimatorOptions,
) -> Result<EstimationResult> {
    csue_on_sample(&ResidualSample::from_matrix(residuals), ms, anchor, opts)
}

fn check_weights(rs: &RestrictionSet, aw: &AdaptiveWeights) -> Result<()> {
    if rs.target != aw.target || rs.pairs().iter().any(|&p| aw.get(p).is_none()) {
        return Err(SvarError::Invalid(format!(
            "adaptive weights do not cover the restriction set {rs}"
        )));
    }
    Ok(())
}

/// Ridge CSUE at a fixed `λ`. `first_step` is the unpenalized CSUE fit; its
/// efficient weight matrix is reused and its estimate is one of two starts
/// (the other is the fit with every restriction binding).
#[allow(clippy::too_many_arguments)]
pub fn estimate_ridge(
    residuals: &DMatrix<f64>,
    ms: &MomentSet,
    anchor: &LabelingAnchor,
    rs: &RestrictionSet,
    lambda: f64,
    aw: &AdaptiveWeights,
    first_step: &EstimationResult,
    opts: &EstimatorOptions,
) -> Result<EstimationResult> {
    ridge_on_sample(&ResidualSample::from_matrix(residuals), ms, anchor, rs, lambda, aw, first_step, opts)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn ridge_on_sample(
    sample: &ResidualSample,
    ms: &MomentSet,
    anchor: &LabelingAnchor,
    rs: &RestrictionSet,
    lambda: f64,
    aw: &AdaptiveWeights,
    first_step: &EstimationResult,
    opts: &EstimatorOptions,
) -> Result<EstimationResult> {
    check_sample(sample, ms, anchor)?;
    if !(lambda >= 0.0) {
        return Err(SvarError::Invalid(format!("λ must be non-negative, got {lambda}")));
    }
    let aw = aw.restricted_to(rs);
    check_weights(rs, &aw)?;
    let weight = &first_step.weight_matrix.matrix;
    let penalty = Penalty::ridge(&aw, lambda);
    let problem = Problem {
        sample,
        ms,
        weight,
        scaled: true,
        penalty: Some(&penalty),
        variance_penalty: false,
    };
    let mut best = problem.solve(opts.start.as_ref().unwrap_or(&first_step.b_hat), &opts.optim)?;
    if !rs.is_empty() && lambda > 0.0 {
        let binding = Penalty::binding(rs);
        let restricted = Problem {
            penalty: Some(&binding),
            ..problem_like(&problem)
        }
        .solve(&first_step.b_hat, &opts.optim);
        if let Ok(r) = restricted {
            if let Ok(alt) = problem.solve(&r.b, &opts.optim) {
                if alt.value < best.value {
                    best = alt;
                }
            }
        }
    }
    if !best.converged {
        log::warn!("ridge optimization at λ = {lambda:e} did not converge after restarts");
    }
    let mut out = finish(best, sample, anchor, first_step.weight_matrix.clone())?;
    out.lambda = Some(lambda);
    out.weights_used = Some(aw);
    out.restrictions = Some(rs.clone());
    Ok(out)
}

fn problem_like<'a>(p: &Problem<'a>) -> Problem<'a> {
    Problem {
        sample: p.sample,
        ms: p.ms,
        weight: p.weight,
        scaled: p.scaled,
        penalty: p.penalty,
        variance_penalty: p.variance_penalty,
    }
}

/// `B̂` = lower Cholesky factor of the residual second-moment matrix.
pub fn estimate_recursive(residuals: &DMatrix<f64>) -> Result<EstimationResult> {
    let sample = ResidualSample::from_matrix(residuals);
    let n = sample.n();
    let b = second_moment_cholesky(&sample)?;
    let a = guarded_inverse(&b, 0.0)?;
    let shocks = residuals * a.transpose();
    Ok(EstimationResult {
        b_hat: b,
        shocks,
        objective: 0.0,
        lambda: None,
        weights_used: None,
        restrictions: None,
        permutation_applied: SignPermutation::identity(n),
        anchor: LabelingAnchor::identity(n),
        converged: true,
        boundary_flag: false,
        weight_matrix: WeightMatrix::identity(0),
        iterations: 0,
    })
}

/// One row of `A = B̂^{-1}` rescaled so the coefficient on `normalized_on` is one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ATypeEquation {
    pub row: usize,
    pub normalized_on: usize,
    /// `(variable, -A[row, variable] / A[row, normalized_on])` for every other variable.
    pub coefficients: Vec<(usize, f64)>,
}

pub fn to_a_type_report(b_hat: &DMatrix<f64>, equations: &[(usize, usize)]) -> Result<Vec<ATypeEquation>> {
    let n = b_hat.nrows();
    let a = guarded_inverse(b_hat, 0.0)?;
    equations
        .iter()
        .map(|&(row, norm)| {
            if row >= n || norm >= n {
                return Err(SvarError::Invalid(format!(
                    "equation ({}, {}) is outside a {n}-variable system",
                    row + 1,
                    norm + 1
                )));
            }
            let pivot = a[(row, norm)];
            if pivot.abs() <= 1e-12 * a.row(row).amax() || pivot == 0.0 {
                return Err(SvarError::DegenerateEquation { row, column: norm });
            }
            let coefficients = (0..n)
                .filter(|&v| v != norm)
                .map(|v| (v, -a[(row, v)] / pivot))
                .collect();
            Ok(ATypeEquation {
                row,
                normalized_on: norm,
                coefficients,
            })
        })
        .collect()
}
