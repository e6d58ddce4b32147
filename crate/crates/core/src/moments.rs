//! Second- to fourth-order moment conditions implied by mutually mean
//! independent, unit-variance shocks.
//!
//! A condition is indexed by a power vector `m`: its sample value at `B` is
//! `(1/T) Σ_t Π_i e(B)_{it}^{m_i} - c(m)` with `e(B)_t = B^{-1} u_t` and
//! `c(m) = 1` exactly for the variance conditions.
//!
//! Canonical order: all order-2 conditions, then order 3, then order 4; within
//! a block the power vectors appear in descending lexicographic order, so for
//! `n = 2` the set reads `e1²-1, e1e2, e2²-1, e1²e2, e1e2², e1³e2, e1e2³`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvarError};

/// Large finite objective value returned for degenerate `B`.
pub const DEGENERATE_PENALTY: f64 = 1e12;

/// Upper bound on the condition number of the regularized `Ŝ`.
pub const MAX_WEIGHT_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentIndex {
    pub powers: Vec<u8>,
    pub order: u8,
    pub target: f64,
}

impl MomentIndex {
    fn new(powers: Vec<u8>) -> Self {
        let order = powers.iter().sum();
        let target = if powers.contains(&1) { 0.0 } else { 1.0 };
        Self {
            powers,
            order,
            target,
        }
    }

    /// `E[Π Z_i^{2 m_i}] - (E[Π Z_i^{m_i}])²` for i.i.d. standard normal `Z`.
    pub fn normal_variance(&self) -> f64 {
        let double_factorial = |m: u8| -> f64 {
            // E[Z^{2m}] = (2m-1)!!
            (1..=m).map(|k| (2 * k - 1) as f64).product()
        };
        let second: f64 = self.powers.iter().map(|&m| double_factorial(m)).product();
        let first: f64 = self
            .powers
            .iter()
            .map(|&m| if m % 2 == 1 { 0.0 } else { double_factorial(m / 2) })
            .product();
        second - first * first
    }

    pub fn label(&self) -> String {
        let mut s = String::new();
        for (i, &m) in self.powers.iter().enumerate() {
            match m {
                0 => {}
                1 => s.push_str(&format!("e{}", i + 1)),
                _ => s.push_str(&format!("e{}^{}", i + 1, m)),
            }
        }
        if self.target != 0.0 {
            s.push_str("-1");
        }
        s
    }
}

/// Compact factor list of one condition: at most four `(variable, power)` pairs.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Factors {
    pub len: usize,
    pub var: [usize; 4],
    pub pow: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct MomentSet {
    n: usize,
    indices: Vec<MomentIndex>,
    order_offsets: [usize; 2],
    factors: Vec<Factors>,
}

impl MomentSet {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MomentIndex] {
        &self.indices
    }

    /// Positions where the order-3 and order-4 blocks begin.
    pub fn order_offsets(&self) -> [usize; 2] {
        self.order_offsets
    }

    pub(crate) fn factors(&self) -> &[Factors] {
        &self.factors
    }
}

/// All conditions for `n` shocks in canonical order.
pub fn enumerate_moments(n: usize) -> Result<MomentSet> {
    if n < 2 {
        return Err(SvarError::Dimension(format!(
            "moment conditions need at least two shocks, got {n}"
        )));
    }
    let mut indices = Vec::new();
    let mut offsets = [0usize; 2];
    for order in 2..=4u8 {
        if order > 2 {
            offsets[usize::from(order) - 3] = indices.len();
        }
        let max_power = if order == 4 { 3 } else { 2 };
        let mut block = Vec::new();
        let mut current = vec![0u8; n];
        collect_powers(&mut current, 0, order, max_power, &mut block);
        block.retain(|p: &Vec<u8>| order < 4 || p.contains(&1));
        block.sort_by(|a, b| b.cmp(a));
        indices.extend(block.into_iter().map(MomentIndex::new));
    }
    let factors = indices
        .iter()
        .map(|ix| {
            let mut f = Factors {
                len: 0,
                var: [0; 4],
                pow: [0; 4],
            };
            for (i, &m) in ix.powers.iter().enumerate() {
                if m > 0 {
                    f.var[f.len] = i;
                    f.pow[f.len] = usize::from(m);
                    f.len += 1;
                }
            }
            f
        })
        .collect();
    Ok(MomentSet {
        n,
        indices,
        order_offsets: offsets,
        factors,
    })
}

fn collect_powers(current: &mut Vec<u8>, pos: usize, remaining: u8, max: u8, out: &mut Vec<Vec<u8>>) {
    if pos == current.len() {
        if remaining == 0 {
            out.push(current.clone());
        }
        return;
    }
    for m in 0..=max.min(remaining) {
        current[pos] = m;
        collect_powers(current, pos + 1, remaining - m, max, out);
    }
    current[pos] = 0;
}

/// Residuals stored row-major (`u_t` contiguous) for the moment kernels.
#[derive(Debug, Clone)]
pub struct ResidualSample {
    n: usize,
    len: usize,
    data: Vec<f64>,
    det_floor: f64,
}

impl ResidualSample {
    pub fn from_matrix(residuals: &DMatrix<f64>) -> Self {
        let (len, n) = residuals.shape();
        let mut data = Vec::with_capacity(len * n);
        for t in 0..len {
            for i in 0..n {
                data.push(residuals[(t, i)]);
            }
        }
        let mut sample = Self {
            n,
            len,
            data,
            det_floor: 0.0,
        };
        sample.det_floor = det_floor_of(&sample);
        sample
    }

    /// Rows `rows` of this sample, keeping the full-sample determinant floor.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.n);
        for &t in rows {
            data.extend_from_slice(self.row(t));
        }
        Self {
            n: self.n,
            len: rows.len(),
            data,
            det_floor: self.det_floor,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.n..(t + 1) * self.n]
    }

    /// `1e-12 · (geometric mean residual sd)^n`.
    pub fn det_floor(&self) -> f64 {
        self.det_floor
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len, self.n, &self.data)
    }
}

fn det_floor_of(sample: &ResidualSample) -> f64 {
    let (n, len) = (sample.n, sample.len.max(1) as f64);
    let mut log_sd = 0.0;
    for i in 0..n {
        let mean: f64 = (0..sample.len).map(|t| sample.row(t)[i]).sum::<f64>() / len;
        let var: f64 = (0..sample.len)
            .map(|t| (sample.row(t)[i] - mean).powi(2))
            .sum::<f64>()
            / len;
        log_sd += 0.5 * var.max(f64::MIN_POSITIVE).ln();
    }
    1e-12 * (log_sd).exp()
}

/// `B^{-1}` after the determinant guard.
pub(crate) fn guarded_inverse(b: &DMatrix<f64>, det_floor: f64) -> Result<DMatrix<f64>> {
    let lu = b.clone().lu();
    let det = lu.determinant();
    if !det.is_finite() || det.abs() <= det_floor {
        return Err(SvarError::Singular { det: det.abs() });
    }
    lu.try_inverse().ok_or(SvarError::Singular { det: det.abs() })
}

/// Unmixed innovations `e(B)_t = B^{-1} u_t`, one row per period.
pub fn innovations(b: &DMatrix<f64>, residuals: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sample = ResidualSample::from_matrix(residuals);
    check_square(b, sample.n())?;
    let a = guarded_inverse(b, sample.det_floor())?;
    Ok(residuals * a.transpose())
}

fn check_square(b: &DMatrix<f64>, n: usize) -> Result<()> {
    if b.nrows() != n || b.ncols() != n {
        return Err(SvarError::Dimension(format!(
            "B is {}×{} but residuals have {n} columns",
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

/// Per-period power table `e_i^m` for `m = 0..=3`, laid out as `[i * 4 + m]`.
#[inline]
pub(crate) fn fill_powers(e: &[f64], table: &mut [f64]) {
    for (i, &v) in e.iter().enumerate() {
        let sq = v * v;
        table[i * 4] = 1.0;
        table[i * 4 + 1] = v;
        table[i * 4 + 2] = sq;
        table[i * 4 + 3] = sq * v;
    }
}

#[inline]
pub(crate) fn factor_product(f: &Factors, table: &[f64]) -> f64 {
    let mut p = 1.0;
    for l in 0..f.len {
        p *= table[f.var[l] * 4 + f.pow[l]];
    }
    p
}

/// Innovations for all periods (row-major) plus their sample second moments.
pub(crate) struct InnovationPass {
    pub e: Vec<f64>,
    pub second_moment: Vec<f64>,
    /// Raw means `(1/T) Σ_t Π e^m` per condition (target not subtracted).
    pub raw: Vec<f64>,
}

/// Evaluate innovations and raw moment means at `A = B^{-1}` (row-major `a`).
pub(crate) fn innovation_pass(a: &[f64], sample: &ResidualSample, ms: &MomentSet) -> InnovationPass {
    let n = sample.n();
    let len = sample.len();
    let k = ms.len();
    let mut e = vec![0.0; len * n];
    let mut second = vec![0.0; n];
    let mut raw = vec![0.0; k];
    let mut table = vec![0.0; n * 4];
    let factors = ms.factors();
    for t in 0..len {
        let u = sample.row(t);
        let et = &mut e[t * n..(t + 1) * n];
        for i in 0..n {
            let row = &a[i * n..(i + 1) * n];
            let mut v = 0.0;
            for j in 0..n {
                v += row[j] * u[j];
            }
            et[i] = v;
            second[i] += v * v;
        }
        fill_powers(et, &mut table);
        for (acc, f) in raw.iter_mut().zip(factors) {
            *acc += factor_product(f, &table);
        }
    }
    let inv = 1.0 / len as f64;
    second.iter_mut().for_each(|v| *v *= inv);
    raw.iter_mut().for_each(|v| *v *= inv);
    InnovationPass { e, second_moment: second, raw }
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Sample moment vector `g_T(B)`.
pub fn sample_moments(b: &DMatrix<f64>, residuals: &DMatrix<f64>, ms: &MomentSet) -> Result<DVector<f64>> {
    let sample = ResidualSample::from_matrix(residuals);
    sample_moments_of(b, &sample, ms)
}

pub(crate) fn sample_moments_of(b: &DMatrix<f64>, sample: &ResidualSample, ms: &MomentSet) -> Result<DVector<f64>> {
    check_square(b, sample.n())?;
    check_moment_dim(ms, sample.n())?;
    let a = guarded_inverse(b, sample.det_floor())?;
    let pass = innovation_pass(&row_major(&a), sample, ms);
    Ok(DVector::from_iterator(
        ms.len(),
        pass.raw.iter().zip(ms.indices()).map(|(r, ix)| r - ix.target),
    ))
}

fn check_moment_dim(ms: &MomentSet, n: usize) -> Result<()> {
    if ms.n() != n {
        return Err(SvarError::Dimension(format!(
            "moment set for {} shocks applied to {n} residual columns",
            ms.n()
        )));
    }
    Ok(())
}

/// Diagonal of the scaling term `D̂(B)`: entry `k` is `Π_i d̂_i^{m_{k,i}}` with
/// `d̂_i` the inverse sample standard deviation of innovation `i`.
pub fn scaling_term(b: &DMatrix<f64>, residuals: &DMatrix<f64>, ms: &MomentSet) -> Result<DVector<f64>> {
    let sample = ResidualSample::from_matrix(residuals);
    check_square(b, sample.n())?;
    check_moment_dim(ms, sample.n())?;
    let a = guarded_inverse(b, sample.det_floor())?;
    let pass = innovation_pass(&row_major(&a), &sample, ms);
    let d = inverse_sd(&pass.second_moment)?;
    Ok(DVector::from_iterator(
        ms.len(),
        ms.factors().iter().map(|f| scaling_entry(f, &d)),
    ))
}

pub(crate) fn inverse_sd(second_moment: &[f64]) -> Result<Vec<f64>> {
    second_moment
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v > 0.0 && v.is_finite() {
                Ok(1.0 / v.sqrt())
            } else {
                Err(SvarError::DegenerateInnovation { index: i })
            }
        })
        .collect()
}

#[inline]
pub(crate) fn scaling_entry(f: &Factors, d: &[f64]) -> f64 {
    let mut s = 1.0;
    for l in 0..f.len {
        s *= d[f.var[l]].powi(f.pow[l] as i32);
    }
    s
}

/// Reciprocal variances of each condition under i.i.d. standard normal shocks.
pub fn normal_variance_weights(ms: &MomentSet) -> DVector<f64> {
    DVector::from_iterator(ms.len(), ms.indices().iter().map(|ix| 1.0 / ix.normal_variance()))
}

/// Inverse of the (regularized) moment covariance `Ŝ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightMatrix {
    pub matrix: DMatrix<f64>,
    /// Ridge `ε` added to the diagonal of `Ŝ` before inversion.
    pub ridge: f64,
}

impl WeightMatrix {
    pub fn identity(k: usize) -> Self {
        Self {
            matrix: DMatrix::identity(k, k),
            ridge: 0.0,
        }
    }

    pub fn was_regularized(&self) -> bool {
        self.ridge > 0.0
    }
}

/// `Ŝ = (1/T) Σ_t f(B̂,u_t) f(B̂,u_t)'` without autocovariance terms.
pub fn moment_covariance(b: &DMatrix<f64>, residuals: &DMatrix<f64>, ms: &MomentSet) -> Result<DMatrix<f64>> {
    moment_covariance_of(b, &ResidualSample::from_matrix(residuals), ms)
}

pub(crate) fn moment_covariance_of(b: &DMatrix<f64>, sample: &ResidualSample, ms: &MomentSet) -> Result<DMatrix<f64>> {
    check_square(b, sample.n())?;
    check_moment_dim(ms, sample.n())?;
    let a = row_major(&guarded_inverse(b, sample.det_floor())?);
    let n = sample.n();
    let k = ms.len();
    let mut s = DMatrix::<f64>::zeros(k, k);
    let mut table = vec![0.0; n * 4];
    let mut e = vec![0.0; n];
    let mut f = vec![0.0; k];
    for t in 0..sample.len() {
        let u = sample.row(t);
        for i in 0..n {
            e[i] = (0..n).map(|j| a[i * n + j] * u[j]).sum();
        }
        fill_powers(&e, &mut table);
        for (c, (fac, ix)) in ms.factors().iter().zip(ms.indices()).enumerate() {
            f[c] = factor_product(fac, &table) - ix.target;
        }
        // upper triangle only, mirrored below
        for c in 0..k {
            let fc = f[c];
            let mut col = s.column_mut(c);
            for r in 0..=c {
                col[r] += f[r] * fc;
            }
        }
    }
    let inv = 1.0 / sample.len() as f64;
    for c in 0..k {
        for r in 0..=c {
            let v = s[(r, c)] * inv;
            s[(r, c)] = v;
            s[(c, r)] = v;
        }
    }
    Ok(s)
}

/// `Ŝ` for serially and mutually independent shocks: every entry is a product
/// of univariate innovation moments up to order 8, with the mean fixed at 0
/// and the variance at 1.
pub fn independent_moment_covariance(b: &DMatrix<f64>, residuals: &DMatrix<f64>, ms: &MomentSet) -> Result<DMatrix<f64>> {
    independent_moment_covariance_of(b, &ResidualSample::from_matrix(residuals), ms)
}

pub(crate) fn independent_moment_covariance_of(
    b: &DMatrix<f64>,
    sample: &ResidualSample,
    ms: &MomentSet,
) -> Result<DMatrix<f64>> {
    check_square(b, sample.n())?;
    check_moment_dim(ms, sample.n())?;
    let a = row_major(&guarded_inverse(b, sample.det_floor())?);
    let n = sample.n();
    // mu[i][p] = mean of e_i^p
    let mut mu = vec![[0.0f64; 9]; n];
    for t in 0..sample.len() {
        let u = sample.row(t);
        for (i, m) in mu.iter_mut().enumerate() {
            let e: f64 = (0..n).map(|j| a[i * n + j] * u[j]).sum();
            let mut p = e * e;
            for slot in m.iter_mut().skip(3) {
                p *= e;
                *slot += p;
            }
        }
    }
    let inv = 1.0 / sample.len() as f64;
    for m in mu.iter_mut() {
        for v in m.iter_mut().skip(3) {
            *v *= inv;
        }
        m[0] = 1.0;
        m[1] = 0.0;
        m[2] = 1.0;
    }
    let k = ms.len();
    let ix = ms.indices();
    let mut s = DMatrix::zeros(k, k);
    for c in 0..k {
        for r in 0..=c {
            let joint: f64 = (0..n)
                .map(|i| mu[i][(ix[c].powers[i] + ix[r].powers[i]) as usize])
                .product();
            let v = joint - ix[c].target * ix[r].target;
            s[(r, c)] = v;
            s[(c, r)] = v;
        }
    }
    Ok(s)
}

/// `Ŵ = (Ŝ + εI)^{-1}` from [`independent_moment_covariance`], with the smallest
/// `ε ≥ 0` keeping the condition number of `Ŝ + εI` at or below [`MAX_WEIGHT_CONDITION`].
pub fn efficient_weight_matrix(b: &DMatrix<f64>, residuals: &DMatrix<f64>, ms: &MomentSet) -> Result<WeightMatrix> {
    efficient_weight_matrix_of(b, &ResidualSample::from_matrix(residuals), ms)
}

pub(crate) fn efficient_weight_matrix_of(b: &DMatrix<f64>, sample: &ResidualSample, ms: &MomentSet) -> Result<WeightMatrix> {
    let s = independent_moment_covariance_of(b, sample, ms)?;
    Ok(regularized_inverse(s))
}

pub(crate) fn regularized_inverse(s: DMatrix<f64>) -> WeightMatrix {
    let k = s.nrows();
    let eig = SymmetricEigen::new(s);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let ridge = if max <= 0.0 {
        1.0
    } else if min * MAX_WEIGHT_CONDITION < max {
        (max - MAX_WEIGHT_CONDITION * min) / (MAX_WEIGHT_CONDITION - 1.0)
    } else {
        0.0
    };
    if ridge > 0.0 {
        log::warn!(
            "moment covariance is ill-conditioned (eigenvalues in [{min:e}, {max:e}]); adding {ridge:e} to its diagonal"
        );
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / (v + ridge));
    let q = &eig.eigenvectors;
    let mut matrix = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    // symmetrize rounding noise
    for c in 0..k {
        for r in 0..c {
            let v = 0.5 * (matrix[(r, c)] + matrix[(c, r)]);
            matrix[(r, c)] = v;
            matrix[(c, r)] = v;
        }
    }
    WeightMatrix { matrix, ridge }
}
