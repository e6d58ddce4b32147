//! Reduced-form VAR estimation.
//!
//! The VAR `y_t = ν + A_1 y_{t-1} + ... + A_p y_{t-p} + u_t` is fitted equation
//! by equation with a Householder QR least-squares solve. The first `p`
//! observations serve as presample and are dropped from the residual matrix.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvarError};

/// A `T × n` panel of observed series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPanel {
    observations: DMatrix<f64>,
    variable_names: Vec<String>,
    time_index: Vec<String>,
}

impl SeriesPanel {
    pub fn new(
        observations: DMatrix<f64>,
        variable_names: Vec<String>,
        time_index: Vec<String>,
    ) -> Result<Self> {
        if observations.ncols() != variable_names.len() {
            return Err(SvarError::Dimension(format!(
                "{} columns but {} variable names",
                observations.ncols(),
                variable_names.len()
            )));
        }
        if observations.nrows() != time_index.len() {
            return Err(SvarError::Dimension(format!(
                "{} rows but {} time stamps",
                observations.nrows(),
                time_index.len()
            )));
        }
        if let Some(pos) = observations.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos % observations.nrows(), pos / observations.nrows());
            return Err(SvarError::Invalid(format!(
                "non-finite observation at row {row}, column {col}"
            )));
        }
        Ok(Self {
            observations,
            variable_names,
            time_index,
        })
    }

    /// Panel with generated names `y1..yn` and integer time stamps.
    pub fn from_matrix(observations: DMatrix<f64>) -> Result<Self> {
        let names = (1..=observations.ncols()).map(|i| format!("y{i}")).collect();
        let index = (1..=observations.nrows()).map(|t| t.to_string()).collect();
        Self::new(observations, names, index)
    }

    pub fn observations(&self) -> &DMatrix<f64> {
        &self.observations
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variable_names
    }

    pub fn time_index(&self) -> &[String] {
        &self.time_index
    }

    pub fn n(&self) -> usize {
        self.observations.ncols()
    }

    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.nrows() == 0
    }

    /// Same names and time stamps, new values.
    pub fn with_observations(&self, observations: DMatrix<f64>) -> Result<Self> {
        Self::new(
            observations,
            self.variable_names.clone(),
            self.time_index.clone(),
        )
    }
}

/// Fitted reduced-form VAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedForm {
    pub n: usize,
    pub p: usize,
    pub has_intercept: bool,
    pub intercept: DVector<f64>,
    pub lag_matrices: Vec<DMatrix<f64>>,
    /// `(T - p) × n` residuals `u_t`.
    pub residuals: DMatrix<f64>,
    pub fitted_sample_size: usize,
}

impl ReducedForm {
    /// Reduced form with no lags and no intercept: the residuals are the data.
    pub fn white_noise(residuals: DMatrix<f64>) -> Self {
        let n = residuals.ncols();
        Self {
            n,
            p: 0,
            has_intercept: false,
            intercept: DVector::zeros(n),
            fitted_sample_size: residuals.nrows(),
            lag_matrices: Vec::new(),
            residuals,
        }
    }

    /// Run the VAR recursion forward from `initial` (the first `p` rows) with
    /// the given shock rows, returning `initial` stacked on top of the simulated
    /// path.
    pub fn simulate(&self, initial: &DMatrix<f64>, shocks: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if initial.nrows() != self.p || initial.ncols() != self.n || shocks.ncols() != self.n {
            return Err(SvarError::Dimension(format!(
                "simulation needs {} initial rows and {} columns",
                self.p, self.n
            )));
        }
        let steps = shocks.nrows();
        let mut y = DMatrix::zeros(self.p + steps, self.n);
        y.rows_mut(0, self.p).copy_from(initial);
        for t in 0..steps {
            let row = self.p + t;
            for i in 0..self.n {
                let mut v = self.intercept[i] + shocks[(t, i)];
                for (s, a) in self.lag_matrices.iter().enumerate() {
                    let lagged = row - s - 1;
                    for j in 0..self.n {
                        v += a[(i, j)] * y[(lagged, j)];
                    }
                }
                y[(row, i)] = v;
            }
        }
        Ok(y)
    }
}

/// Equation-by-equation least squares fit of a VAR(p).
pub fn fit_var(panel: &SeriesPanel, p: usize, intercept: bool) -> Result<ReducedForm> {
    let y = panel.observations();
    let (t_total, n) = y.shape();
    if t_total <= n * p + 1 {
        return Err(SvarError::InsufficientData(format!(
            "{t_total} observations cannot support {p} lags of {n} variables"
        )));
    }
    let t_eff = t_total - p;
    let k = usize::from(intercept) + n * p;
    let lhs = y.rows(p, t_eff).into_owned();

    if k == 0 {
        return Ok(ReducedForm {
            n,
            p,
            has_intercept: false,
            intercept: DVector::zeros(n),
            lag_matrices: Vec::new(),
            fitted_sample_size: t_eff,
            residuals: lhs,
        });
    }

    let design = design_matrix(y, p, intercept);
    let qr = design.clone().qr();
    let r = qr.r();
    let scale = (0..k).map(|i| r[(i, i)].abs()).fold(0.0_f64, f64::max);
    for i in 0..k {
        if r[(i, i)].abs() <= 1e-10 * scale.max(f64::MIN_POSITIVE) {
            return Err(SvarError::SingularDesign {
                equation: panel.variable_names()[0].clone(),
                column: i,
            });
        }
    }
    let qty = qr.q().transpose() * &lhs;
    let coef = r.solve_upper_triangular(&qty).ok_or_else(|| SvarError::SingularDesign {
        equation: panel.variable_names()[0].clone(),
        column: 0,
    })?;
    let residuals = &lhs - &design * &coef;

    let offset = usize::from(intercept);
    let intercept_vec = if intercept {
        coef.row(0).transpose()
    } else {
        DVector::zeros(n)
    };
    let lag_matrices = (0..p)
        .map(|s| {
            DMatrix::from_fn(n, n, |i, j| coef[(offset + s * n + j, i)])
        })
        .collect();

    Ok(ReducedForm {
        n,
        p,
        has_intercept: intercept,
        intercept: intercept_vec,
        lag_matrices,
        residuals,
        fitted_sample_size: t_eff,
    })
}

/// Regressor matrix `[1, y_{t-1}', ..., y_{t-p}']` for `t = p..T`.
pub(crate) fn design_matrix(y: &DMatrix<f64>, p: usize, intercept: bool) -> DMatrix<f64> {
    let (t_total, n) = y.shape();
    let t_eff = t_total - p;
    let offset = usize::from(intercept);
    DMatrix::from_fn(t_eff, offset + n * p, |t, c| {
        if intercept && c == 0 {
            1.0
        } else {
            let c = c - offset;
            let (lag, var) = (c / n + 1, c % n);
            y[(p + t - lag, var)]
        }
    })
}

/// Companion form of the VAR: `A_1..A_p` across the top block row and identity
/// blocks on the first sub-diagonal.
pub fn companion_matrix(rf: &ReducedForm) -> DMatrix<f64> {
    let (n, p) = (rf.n, rf.p);
    let mut c = DMatrix::zeros(n * p, n * p);
    for (s, a) in rf.lag_matrices.iter().enumerate() {
        c.view_mut((0, s * n), (n, n)).copy_from(a);
    }
    for s in 1..p {
        for i in 0..n {
            c[(s * n + i, (s - 1) * n + i)] = 1.0;
        }
    }
    c
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}
