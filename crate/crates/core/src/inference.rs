//! Impulse responses, variance and historical decompositions, residual
//! bootstrap bands and shock diagnostics.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvarError};
use crate::estimator::{
    compute_adaptive_weights, csue_on_sample, estimate_recursive, ridge_on_sample, EstimationResult,
    EstimatorOptions, RestrictionSet,
};
use crate::labeling::LabelingAnchor;
use crate::moments::{enumerate_moments, ResidualSample};
use crate::tuning::{cv_path, CvOptions};
use crate::var_reduced::{fit_var, ReducedForm, SeriesPanel};

/// Type-7 quantile of an ascending slice.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `psi[t][(i, j)]`: response of variable `i` to shock `j` after `t` periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponses {
    pub psi: Vec<DMatrix<f64>>,
}

impl ImpulseResponses {
    pub fn horizon(&self) -> usize {
        self.psi.len() - 1
    }

    pub fn n(&self) -> usize {
        self.psi[0].nrows()
    }

    pub fn get(&self, variable: usize, shock: usize, t: usize) -> f64 {
        self.psi[t][(variable, shock)]
    }
}

/// `Ψ_0 = B̂`, `Ψ_t = Σ_{s=1}^{min(t,p)} A_s Ψ_{t-s}`.
pub fn impulse_responses(rf: &ReducedForm, b_hat: &DMatrix<f64>, horizon: usize) -> Result<ImpulseResponses> {
    if b_hat.shape() != (rf.n, rf.n) {
        return Err(SvarError::Dimension(format!(
            "B̂ is {}×{} for a VAR in {} variables",
            b_hat.nrows(),
            b_hat.ncols(),
            rf.n
        )));
    }
    let mut psi: Vec<DMatrix<f64>> = Vec::with_capacity(horizon + 1);
    psi.push(b_hat.clone());
    for t in 1..=horizon {
        let mut next = DMatrix::zeros(rf.n, rf.n);
        for (s, a) in rf.lag_matrices.iter().enumerate().take(t) {
            next += a * &psi[t - s - 1];
        }
        psi.push(next);
    }
    Ok(ImpulseResponses { psi })
}

/// Share of shock `j` in the `h`-step forecast error variance of variable `i`.
pub fn fevd(irf: &ImpulseResponses, h: usize) -> Result<DMatrix<f64>> {
    if h == 0 || h > irf.psi.len() {
        return Err(SvarError::Invalid(format!(
            "FEVD horizon must be in 1..={}, got {h}",
            irf.psi.len()
        )));
    }
    let n = irf.n();
    let mut share = DMatrix::zeros(n, n);
    for p in &irf.psi[..h] {
        share += p.component_mul(p);
    }
    for i in 0..n {
        let total: f64 = share.row(i).sum();
        if !(total > 0.0) {
            return Err(SvarError::UndefinedShare(i));
        }
        share.row_mut(i).scale_mut(1.0 / total);
    }
    Ok(share)
}

/// Per-shock contributions to the effective sample plus the path implied by
/// initial values and the intercept alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistoricalDecomposition {
    /// `contributions[j][(t, i)]`: part of variable `i` at time `t` due to shock `j`.
    pub contributions: Vec<DMatrix<f64>>,
    pub baseline: DMatrix<f64>,
}

impl HistoricalDecomposition {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.contributions.iter().fold(self.baseline.clone(), |acc, c| acc + c)
    }
}

/// `initial` holds the `p` observations preceding the shocks.
pub fn historical_decomposition(
    rf: &ReducedForm,
    b_hat: &DMatrix<f64>,
    shocks: &DMatrix<f64>,
    initial: &DMatrix<f64>,
) -> Result<HistoricalDecomposition> {
    let n = rf.n;
    let t_eff = shocks.nrows();
    if shocks.ncols() != n || initial.shape() != (rf.p, n) {
        return Err(SvarError::Dimension("shocks or initial values do not match the VAR".into()));
    }
    let irf = impulse_responses(rf, b_hat, t_eff.saturating_sub(1))?;
    let mut contributions = vec![DMatrix::zeros(t_eff, n); n];
    for (j, c) in contributions.iter_mut().enumerate() {
        for t in 0..t_eff {
            for s in 0..=t {
                let e = shocks[(t - s, j)];
                if e != 0.0 {
                    for i in 0..n {
                        c[(t, i)] += irf.psi[s][(i, j)] * e;
                    }
                }
            }
        }
    }
    let path = rf.simulate(initial, &DMatrix::zeros(t_eff, n))?;
    let baseline = path.rows(rf.p, t_eff).into_owned();
    Ok(HistoricalDecomposition { contributions, baseline })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EstimatorRecipe {
    Csue,
    Recursive,
    /// Ridge CSUE; `fixed_lambda` skips cross-validation in each draw.
    Ridge {
        restrictions: RestrictionSet,
        cv: CvOptions,
        fixed_lambda: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapOptions {
    pub draws: usize,
    /// Nominal coverage, e.g. 0.68.
    pub level: f64,
    pub horizon: usize,
    pub seed: u64,
    pub parallel: bool,
    pub estimator: EstimatorOptions,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            draws: 500,
            level: 0.68,
            horizon: 20,
            seed: 0,
            parallel: true,
            estimator: EstimatorOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapBands {
    pub level: f64,
    pub draws: usize,
    /// Draws that failed and were replaced.
    pub redraws: usize,
    pub point: Vec<DMatrix<f64>>,
    pub lower: Vec<DMatrix<f64>>,
    pub median: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
    /// Impact matrix of every successful draw.
    #[serde(skip)]
    pub b_draws: Vec<DMatrix<f64>>,
    /// Impulse responses of every successful draw.
    #[serde(skip)]
    pub irf_draws: Vec<ImpulseResponses>,
}

fn draw_rng(seed: u64, draw: usize, attempt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((attempt as u64) << 32) | draw as u64);
    rng
}

fn run_recipe(
    residuals: &DMatrix<f64>,
    recipe: &EstimatorRecipe,
    anchor: &LabelingAnchor,
    start: &DMatrix<f64>,
    opts: &EstimatorOptions,
    cv_seed: u64,
) -> Result<DMatrix<f64>> {
    if let EstimatorRecipe::Recursive = recipe {
        return Ok(estimate_recursive(residuals)?.b_hat);
    }
    let sample = ResidualSample::from_matrix(residuals);
    let ms = enumerate_moments(sample.n())?;
    let opts = EstimatorOptions {
        start: Some(start.clone()),
        ..opts.clone()
    };
    let csue = csue_on_sample(&sample, &ms, anchor, &opts)?;
    match recipe {
        EstimatorRecipe::Csue | EstimatorRecipe::Recursive => Ok(csue.b_hat),
        EstimatorRecipe::Ridge {
            restrictions,
            cv,
            fixed_lambda,
        } => {
            let opts = EstimatorOptions { start: None, ..opts };
            let aw = compute_adaptive_weights(&csue, restrictions)?;
            let lambda = match fixed_lambda {
                Some(l) => *l,
                None => {
                    let cv = CvOptions {
                        seed: cv_seed,
                        parallel: false,
                        ..cv.clone()
                    };
                    cv_path(&sample, &ms, anchor, restrictions, &aw, &csue, &cv, &opts)?.selected_lambda
                }
            };
            Ok(ridge_on_sample(&sample, &ms, anchor, restrictions, lambda, &aw, &csue, &opts)?.b_hat)
        }
    }
}

/// Median-centered bands `[x - |q_lo - q_med|, x + |q_hi - q_med|]` around the point responses `x`.
pub fn bands_from_draws(
    point: &ImpulseResponses,
    draws: &[ImpulseResponses],
    level: f64,
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let n = point.n();
    let alpha = 1.0 - level;
    let (mut lower, mut median, mut upper) = (Vec::new(), Vec::new(), Vec::new());
    let mut values = vec![0.0; draws.len()];
    for t in 0..point.psi.len() {
        let mut lo = DMatrix::zeros(n, n);
        let mut me = DMatrix::zeros(n, n);
        let mut hi = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                for (v, irf) in values.iter_mut().zip(draws) {
                    *v = irf.psi[t][(i, j)];
                }
                values.sort_by(f64::total_cmp);
                let q_lo = quantile(&values, alpha / 2.0);
                let q_me = quantile(&values, 0.5);
                let q_hi = quantile(&values, 1.0 - alpha / 2.0);
                let x = point.psi[t][(i, j)];
                lo[(i, j)] = x - (q_lo - q_me).abs();
                me[(i, j)] = q_me;
                hi[(i, j)] = x + (q_hi - q_me).abs();
            }
        }
        lower.push(lo);
        median.push(me);
        upper.push(hi);
    }
    (lower, median, upper)
}

/// Residual bootstrap: resample VAR residual rows, rebuild the series from the
/// first `p` observations, refit, rerun the recipe labeled against the point
/// estimate, and form median-centered bands around the point responses.
pub fn bootstrap_bands(
    panel: &SeriesPanel,
    p: usize,
    intercept: bool,
    recipe: &EstimatorRecipe,
    point: &EstimationResult,
    opts: &BootstrapOptions,
) -> Result<BootstrapBands> {
    if opts.draws < 2 {
        return Err(SvarError::Invalid("the bootstrap needs at least two draws".into()));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(SvarError::Invalid(format!("band level must be in (0, 1), got {}", opts.level)));
    }
    let rf = fit_var(panel, p, intercept)?;
    let point_irf = impulse_responses(&rf, &point.b_hat, opts.horizon)?;
    let anchor = LabelingAnchor::new(point.b_hat.clone())?;
    let initial = panel.observations().rows(0, p).into_owned();
    let t_eff = rf.residuals.nrows();
    let budget = (opts.draws as f64 * 0.1).ceil() as usize;

    let one_draw = |draw: usize| -> (Option<(DMatrix<f64>, ImpulseResponses)>, usize) {
        let mut failures = 0;
        for attempt in 0..=budget {
            let mut rng = draw_rng(opts.seed, draw, attempt);
            let rows: Vec<usize> = (0..t_eff).map(|_| rng.random_range(0..t_eff)).collect();
            let resampled = rf.residuals.select_rows(&rows);
            let cv_seed = rng.random::<u64>();
            let result = (|| -> Result<(DMatrix<f64>, ImpulseResponses)> {
                let y = rf.simulate(&initial, &resampled)?;
                let draw_panel = panel.with_observations(y)?;
                let draw_rf = fit_var(&draw_panel, p, intercept)?;
                let b = run_recipe(&draw_rf.residuals, recipe, &anchor, &point.b_hat, &opts.estimator, cv_seed)?;
                let irf = impulse_responses(&draw_rf, &b, opts.horizon)?;
                Ok((b, irf))
            })();
            match result {
                Ok(irf) => return (Some(irf), failures),
                Err(e) => {
                    log::debug!("bootstrap draw {draw} attempt {attempt} failed: {e}");
                    failures += 1;
                }
            }
        }
        (None, failures)
    };
    let results: Vec<(Option<(DMatrix<f64>, ImpulseResponses)>, usize)> = if opts.parallel {
        (0..opts.draws).into_par_iter().map(one_draw).collect()
    } else {
        (0..opts.draws).map(one_draw).collect()
    };
    let redraws: usize = results.iter().map(|r| r.1).sum();
    if redraws > budget || results.iter().any(|r| r.0.is_none()) {
        return Err(SvarError::Bootstrap(format!(
            "{redraws} failed draws exceed the budget of {budget}"
        )));
    }
    let (b_draws, irfs): (Vec<DMatrix<f64>>, Vec<ImpulseResponses>) = results.into_iter().filter_map(|r| r.0).unzip();
    let (lower, median, upper) = bands_from_draws(&point_irf, &irfs, opts.level);
    Ok(BootstrapBands {
        level: opts.level,
        draws: opts.draws,
        redraws,
        point: point_irf.psi,
        lower,
        median,
        upper,
        b_draws,
        irf_draws: irfs,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShockDiagnostics {
    pub skewness: Vec<f64>,
    pub kurtosis: Vec<f64>,
    pub jarque_bera: Vec<f64>,
    pub p_value: Vec<f64>,
    /// `E[e_i² e_j²]` of the standardized shocks.
    pub symmetric_fourth: DMatrix<f64>,
}

pub fn shock_diagnostics(shocks: &DMatrix<f64>) -> Result<ShockDiagnostics> {
    let (t, n) = shocks.shape();
    if t < 8 {
        return Err(SvarError::InsufficientData(format!("{t} observations for shock diagnostics")));
    }
    let mut z = shocks.clone();
    for j in 0..n {
        let mean = z.column(j).mean();
        let var = z.column(j).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64;
        if !(var > 0.0) {
            return Err(SvarError::DegenerateInnovation { index: j });
        }
        let sd = var.sqrt();
        z.column_mut(j).apply(|v| *v = (*v - mean) / sd);
    }
    let mut skewness = Vec::with_capacity(n);
    let mut kurtosis = Vec::with_capacity(n);
    let mut jarque_bera = Vec::with_capacity(n);
    let mut p_value = Vec::with_capacity(n);
    for j in 0..n {
        let s = z.column(j).iter().map(|v| v.powi(3)).sum::<f64>() / t as f64;
        let k = z.column(j).iter().map(|v| v.powi(4)).sum::<f64>() / t as f64;
        let jb = t as f64 * (s * s / 6.0 + (k - 3.0).powi(2) / 24.0);
        skewness.push(s);
        kurtosis.push(k);
        jarque_bera.push(jb);
        // chi-square(2) upper tail
        p_value.push((-jb / 2.0).exp());
    }
    let sq = z.map(|v| v * v);
    let symmetric_fourth = sq.transpose() * &sq / t as f64;
    Ok(ShockDiagnostics {
        skewness,
        kurtosis,
        jarque_bera,
        p_value,
        symmetric_fourth,
    })
}

fn opt_cell(m: Option<&DMatrix<f64>>, i: usize, j: usize) -> String {
    m.map(|m| m[(i, j)].to_string()).unwrap_or_default()
}

/// Rows `variable,shock,horizon,value,lower,upper`.
pub fn irf_csv(irf: &ImpulseResponses, bands: Option<&BootstrapBands>, names: &[String]) -> String {
    let mut out = String::from("variable,shock,horizon,value,lower,upper\n");
    let n = irf.n();
    for (t, psi) in irf.psi.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    names[i],
                    j + 1,
                    t,
                    psi[(i, j)],
                    opt_cell(bands.and_then(|b| b.lower.get(t)), i, j),
                    opt_cell(bands.and_then(|b| b.upper.get(t)), i, j)
                ));
            }
        }
    }
    out
}

/// FEVD shares for horizons `1..=h`, with equal-tailed bands when bootstrap draws are supplied.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FevdTable {
    pub share: Vec<DMatrix<f64>>,
    pub lower: Option<Vec<DMatrix<f64>>>,
    pub upper: Option<Vec<DMatrix<f64>>>,
}

impl FevdTable {
    /// Shares at horizon `h` (1-based).
    pub fn at(&self, h: usize) -> &DMatrix<f64> {
        &self.share[h - 1]
    }
}

pub fn fevd_table(point: &ImpulseResponses, draws: &[ImpulseResponses], h: usize, level: f64) -> Result<FevdTable> {
    let share = (1..=h).map(|k| fevd(point, k)).collect::<Result<Vec<_>>>()?;
    if draws.is_empty() {
        return Ok(FevdTable {
            share,
            lower: None,
            upper: None,
        });
    }
    let n = point.n();
    let alpha = 1.0 - level;
    let mut lower = Vec::with_capacity(h);
    let mut upper = Vec::with_capacity(h);
    for k in 1..=h {
        let per_draw = draws.iter().map(|d| fevd(d, k)).collect::<Result<Vec<_>>>()?;
        let mut lo = DMatrix::zeros(n, n);
        let mut hi = DMatrix::zeros(n, n);
        let mut values = vec![0.0; per_draw.len()];
        for i in 0..n {
            for j in 0..n {
                for (v, d) in values.iter_mut().zip(&per_draw) {
                    *v = d[(i, j)];
                }
                values.sort_by(f64::total_cmp);
                lo[(i, j)] = quantile(&values, alpha / 2.0);
                hi[(i, j)] = quantile(&values, 1.0 - alpha / 2.0);
            }
        }
        lower.push(lo);
        upper.push(hi);
    }
    Ok(FevdTable {
        share,
        lower: Some(lower),
        upper: Some(upper),
    })
}

/// Rows `variable,shock,horizon,value,lower,upper`.
pub fn fevd_csv(table: &FevdTable, names: &[String]) -> String {
    let mut out = String::from("variable,shock,horizon,value,lower,upper\n");
    for (k, share) in table.share.iter().enumerate() {
        for i in 0..share.nrows() {
            for j in 0..share.ncols() {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    names[i],
                    j + 1,
                    k + 1,
                    share[(i, j)],
                    opt_cell(table.lower.as_ref().map(|l| &l[k]), i, j),
                    opt_cell(table.upper.as_ref().map(|u| &u[k]), i, j)
                ));
            }
        }
    }
    out
}

/// Rows `variable,shock,time,value`; shock `baseline` is the deterministic part.
pub fn historical_csv(hd: &HistoricalDecomposition, names: &[String], times: &[String]) -> String {
    let mut out = String::from("variable,shock,time,value\n");
    let (t_eff, n) = hd.baseline.shape();
    for t in 0..t_eff {
        for i in 0..n {
            out.push_str(&format!("{},baseline,{},{}\n", names[i], times[t], hd.baseline[(t, i)]));
            for (j, c) in hd.contributions.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", names[i], j + 1, times[t], c[(t, i)]));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{draw_shocks, simulate_svar, DgpPreset, ShockSpec};
    use proptest::prelude::*;

    fn ar_rf(lags: Vec<DMatrix<f64>>) -> ReducedForm {
        let n = lags.first().map(|a| a.nrows()).unwrap_or(1);
        let mut rf = ReducedForm::white_noise(DMatrix::zeros(1, n));
        rf.p = lags.len();
        rf.lag_matrices = lags;
        rf
    }

    #[test]
    fn type7_quantiles() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&x, 0.5), 2.5);
        assert_eq!(quantile(&x, 0.0), 1.0);
        assert_eq!(quantile(&x, 1.0), 4.0);
        assert!((quantile(&x, 0.4) - 2.2).abs() < 1e-12);
    }

    #[test]
    fn irf_geometric_and_static() {
        let rf = ar_rf(vec![DMatrix::from_element(1, 1, 0.5)]);
        let irf = impulse_responses(&rf, &DMatrix::from_element(1, 1, 2.0), 3).unwrap();
        let path: Vec<f64> = (0..4).map(|t| irf.get(0, 0, t)).collect();
        assert_eq!(path, vec![2.0, 1.0, 0.5, 0.25]);
        let rf = ReducedForm::white_noise(DMatrix::zeros(1, 2));
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 2.0]);
        let irf = impulse_responses(&rf, &b, 2).unwrap();
        assert_eq!(irf.psi[0], b);
        assert_eq!(irf.psi[1], DMatrix::zeros(2, 2));
    }

    #[test]
    fn irf_matches_simulated_unit_shock() {
        let a1 = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]);
        let a2 = DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.05, -0.1]);
        let rf = ar_rf(vec![a1, a2]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.4, 2.0]);
        let irf = impulse_responses(&rf, &b, 10).unwrap();
        for j in 0..2 {
            let mut u = DMatrix::zeros(11, 2);
            u.set_row(0, &b.column(j).transpose());
            let path = rf.simulate(&DMatrix::zeros(2, 2), &u).unwrap();
            for t in 0..=10 {
                for i in 0..2 {
                    assert!((path[(t + 2, i)] - irf.get(i, j, t)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn fevd_identity_and_errors() {
        let rf = ReducedForm::white_noise(DMatrix::zeros(1, 3));
        let irf = impulse_responses(&rf, &DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0])), 4).unwrap();
        assert_eq!(fevd(&irf, 3).unwrap(), DMatrix::identity(3, 3));
        assert!(fevd(&irf, 0).is_err());
        let zero = impulse_responses(&rf, &DMatrix::zeros(3, 3), 2).unwrap();
        assert!(matches!(fevd(&zero, 1), Err(SvarError::UndefinedShare(0))));
    }

    proptest! {
        #[test]
        fn fevd_rows_sum_to_one(vals in proptest::collection::vec(-3.0f64..3.0, 9), lag in proptest::collection::vec(-0.3f64..0.3, 9), h in 1usize..15) {
            let b = DMatrix::from_row_slice(3, 3, &vals) + DMatrix::identity(3, 3) * 4.0;
            let rf = ar_rf(vec![DMatrix::from_row_slice(3, 3, &lag)]);
            let irf = impulse_responses(&rf, &b, 15).unwrap();
            let share = fevd(&irf, h).unwrap();
            for i in 0..3 {
                prop_assert!((share.row(i).sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn historical_decomposition_reconstructs_the_series() {
        let panel = simulate_svar(&DgpPreset::McLagsCommonVolatility.spec(400), 3).unwrap();
        let rf = fit_var(&panel, 2, true).unwrap();
        let b = crate::estimator::second_moment_cholesky(&ResidualSample::from_matrix(&rf.residuals)).unwrap();
        let shocks = crate::moments::innovations(&b, &rf.residuals).unwrap();
        let initial = panel.observations().rows(0, 2).into_owned();
        let hd = historical_decomposition(&rf, &b, &shocks, &initial).unwrap();
        let observed = panel.observations().rows(2, 398).into_owned();
        let err = (hd.reconstruct() - &observed).amax() / observed.amax();
        assert!(err <= 1e-8, "relative error {err}");
    }

    #[test]
    fn single_shock_contribution_is_the_irf() {
        let rf = ar_rf(vec![DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.4])]);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
        let mut shocks = DMatrix::zeros(6, 2);
        shocks[(0, 1)] = 2.0;
        let hd = historical_decomposition(&rf, &b, &shocks, &DMatrix::zeros(1, 2)).unwrap();
        let irf = impulse_responses(&rf, &b, 5).unwrap();
        for t in 0..6 {
            for i in 0..2 {
                assert!((hd.contributions[1][(t, i)] - 2.0 * irf.get(i, 1, t)).abs() < 1e-14);
                assert_eq!(hd.contributions[0][(t, i)], 0.0);
            }
        }
        let none = historical_decomposition(&rf, &b, &DMatrix::zeros(6, 2), &DMatrix::zeros(1, 2)).unwrap();
        assert!(none.contributions.iter().all(|c| c.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn diagnostics_of_symmetric_sample() {
        // standardized values ±1 and ±sqrt(5)/… chosen so S = 0 and K = 3 exactly
        let a = 1.0f64;
        let b = 3.0f64.sqrt();
        let col = [a, -a, a, -a, b, -b, 0.0, 0.0, a, -a, a, -a, b, -b, 0.0, 0.0];
        let m2 = col.iter().map(|v| v * v).sum::<f64>() / 16.0;
        let m4 = col.iter().map(|v| v.powi(4)).sum::<f64>() / 16.0;
        let d = shock_diagnostics(&DMatrix::from_column_slice(16, 1, &col)).unwrap();
        assert!(d.skewness[0].abs() < 1e-12);
        assert!((d.kurtosis[0] - m4 / (m2 * m2)).abs() < 1e-12);
        let k = m4 / (m2 * m2);
        assert!((d.jarque_bera[0] - 16.0 * (k - 3.0).powi(2) / 24.0).abs() < 1e-9);
        assert!(d.jarque_bera[0] >= 0.0);
    }

    #[test]
    fn diagnostics_on_mixture_and_common_volatility() {
        let e = draw_shocks(&ShockSpec::mixture(2), 100_000, 7).unwrap();
        let d = shock_diagnostics(&e).unwrap();
        assert!((d.skewness[0] - 0.9).abs() < 0.05);
        assert!((d.kurtosis[0] - 5.4).abs() < 0.25);
        assert!((d.symmetric_fourth[(0, 1)] - 1.0).abs() < 0.05);
        let spec = DgpPreset::McLagsCommonVolatility.spec(100_000).shocks;
        let d = shock_diagnostics(&draw_shocks(&spec, 100_000, 7).unwrap()).unwrap();
        assert!(d.symmetric_fourth[(2, 3)] > 1.2);
    }

    #[test]
    fn gaussian_jb_p_values_are_uniform() {
        let spec = ShockSpec::with_gaussian(1, &[0]);
        let mut p: Vec<f64> = (0..400)
            .map(|r| shock_diagnostics(&draw_shocks(&spec, 2000, 1000 + r).unwrap()).unwrap().p_value[0])
            .collect();
        p.sort_by(f64::total_cmp);
        let m = p.len() as f64;
        let ks = p
            .iter()
            .enumerate()
            .map(|(i, v)| ((i + 1) as f64 / m - v).abs().max((v - i as f64 / m).abs()))
            .fold(0.0, f64::max);
        // 5% critical value 1.36 / sqrt(m)
        assert!(ks < 1.36 / m.sqrt(), "KS distance {ks}");
    }

    fn small_panel() -> SeriesPanel {
        simulate_svar(&DgpPreset::Mc.spec(300), 12).unwrap()
    }

    #[test]
    fn identical_draws_give_zero_width_bands() {
        let point = ImpulseResponses {
            psi: vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 2.0])],
        };
        let draw = ImpulseResponses {
            psi: vec![DMatrix::from_row_slice(2, 2, &[1.2, 0.1, 0.4, 2.5])],
        };
        let (lo, me, hi) = bands_from_draws(&point, &[draw.clone(), draw.clone()], 0.68);
        assert_eq!(lo[0], point.psi[0]);
        assert_eq!(hi[0], point.psi[0]);
        assert_eq!(me[0], draw.psi[0]);
    }

    #[test]
    fn bands_bracket_the_point_estimate() {
        let panel = small_panel();
        let rf = fit_var(&panel, 0, false).unwrap();
        let point = estimate_recursive(&rf.residuals).unwrap();
        let opts = BootstrapOptions {
            draws: 20,
            horizon: 0,
            seed: 1,
            ..BootstrapOptions::default()
        };
        let bands = bootstrap_bands(&panel, 0, false, &EstimatorRecipe::Recursive, &point, &opts).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!(bands.lower[0][(i, j)] <= bands.point[0][(i, j)]);
                assert!(bands.point[0][(i, j)] <= bands.upper[0][(i, j)]);
            }
        }
        assert!(bands.upper[0][(0, 0)] > bands.lower[0][(0, 0)]);
    }

    #[test]
    fn bootstrap_is_seed_deterministic() {
        let panel = small_panel();
        let rf = fit_var(&panel, 1, true).unwrap();
        let sample = ResidualSample::from_matrix(&rf.residuals);
        let ms = enumerate_moments(4).unwrap();
        let point = csue_on_sample(&sample, &ms, &LabelingAnchor::identity(4), &EstimatorOptions::default()).unwrap();
        let opts = BootstrapOptions {
            draws: 4,
            horizon: 2,
            seed: 5,
            ..BootstrapOptions::default()
        };
        let a = bootstrap_bands(&panel, 1, true, &EstimatorRecipe::Csue, &point, &opts).unwrap();
        let b = bootstrap_bands(&panel, 1, true, &EstimatorRecipe::Csue, &point, &BootstrapOptions { parallel: false, ..opts }).unwrap();
        assert_eq!(a.lower, b.lower);
        assert_eq!(a.upper, b.upper);
        assert_eq!(a.point[0], point.b_hat);
    }
}
