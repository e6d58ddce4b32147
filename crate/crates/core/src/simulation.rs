//! Data-generating processes, the Monte Carlo runner and a numerical
//! identification check.
//!
//! Replication `r` of an experiment with master seed `s` draws from
//! `ChaCha8Rng::seed_from_u64(s)` switched to stream `r`, so replications are
//! independent of scheduling and of each other.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvarError};
use crate::estimator::{
    estimate_recursive, EstimationResult, EstimatorOptions, RestrictionSet, RestrictionTarget,
};
use crate::inference::{bootstrap_bands, BootstrapOptions, EstimatorRecipe};
use crate::labeling::{project_to_representative, LabelingAnchor};
use crate::moments::{enumerate_moments, normal_variance_weights, MomentSet, ResidualSample};
use crate::optim::{minimize, OptimOptions};
use crate::tuning::{ridge_pipeline, selection_pipeline, CvOptions};
use crate::var_reduced::{companion_matrix, fit_var, spectral_radius, ReducedForm, SeriesPanel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShockDistribution {
    /// `weight · N(mean1, sd1²) + (1 - weight) · N(mean2, sd2²)`.
    Mixture {
        weight: f64,
        mean1: f64,
        sd1: f64,
        mean2: f64,
        sd2: f64,
    },
    Gaussian,
}

impl ShockDistribution {
    /// `0.79 N(-0.2, 0.7²) + 0.21 N(0.75, 1.5²)`.
    pub fn skewed_mixture() -> Self {
        ShockDistribution::Mixture {
            weight: 0.79,
            mean1: -0.2,
            sd1: 0.7,
            mean2: 0.75,
            sd2: 1.5,
        }
    }

    /// Population mean and variance.
    pub fn mean_variance(&self) -> (f64, f64) {
        match *self {
            ShockDistribution::Gaussian => (0.0, 1.0),
            ShockDistribution::Mixture {
                weight,
                mean1,
                sd1,
                mean2,
                sd2,
            } => {
                let mean = weight * mean1 + (1.0 - weight) * mean2;
                let second = weight * (sd1 * sd1 + mean1 * mean1) + (1.0 - weight) * (sd2 * sd2 + mean2 * mean2);
                (mean, second - mean * mean)
            }
        }
    }

    /// Population skewness and excess kurtosis.
    pub fn skewness_excess_kurtosis(&self) -> (f64, f64) {
        match *self {
            ShockDistribution::Gaussian => (0.0, 0.0),
            ShockDistribution::Mixture {
                weight,
                mean1,
                sd1,
                mean2,
                sd2,
            } => {
                let (mean, var) = self.mean_variance();
                let central = |w: f64, mu: f64, s: f64| {
                    let d = mu - mean;
                    let m3 = d.powi(3) + 3.0 * d * s * s;
                    let m4 = d.powi(4) + 6.0 * d * d * s * s + 3.0 * s.powi(4);
                    (w * m3, w * m4)
                };
                let (a3, a4) = central(weight, mean1, sd1);
                let (b3, b4) = central(1.0 - weight, mean2, sd2);
                ((a3 + b3) / var.powf(1.5), (a4 + b4) / (var * var) - 3.0)
            }
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        match *self {
            ShockDistribution::Gaussian => z,
            ShockDistribution::Mixture {
                weight,
                mean1,
                sd1,
                mean2,
                sd2,
            } => {
                if rng.random::<f64>() < weight {
                    mean1 + sd1 * z
                } else {
                    mean2 + sd2 * z
                }
            }
        }
    }
}

/// `ε̃_it = ψ_t σ_i ε_it + (1 - ψ_t) ε_it` with one `ψ_t ~ Bernoulli(probability)` per period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonVolatility {
    pub probability: f64,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockSpec {
    pub distributions: Vec<ShockDistribution>,
    pub common_volatility: Option<CommonVolatility>,
    /// Standardize each shock with its population mean and variance.
    pub normalize: bool,
}

impl ShockSpec {
    pub fn mixture(n: usize) -> Self {
        Self {
            distributions: vec![ShockDistribution::skewed_mixture(); n],
            common_volatility: None,
            normalize: true,
        }
    }

    /// Mixture shocks except those listed (zero-based), which are Gaussian.
    pub fn with_gaussian(n: usize, gaussian: &[usize]) -> Self {
        let mut spec = Self::mixture(n);
        for &j in gaussian {
            if j < n {
                spec.distributions[j] = ShockDistribution::Gaussian;
            }
        }
        spec
    }

    pub fn n(&self) -> usize {
        self.distributions.len()
    }

    fn validate(&self) -> Result<()> {
        for d in &self.distributions {
            if let ShockDistribution::Mixture { weight, sd1, sd2, .. } = *d {
                if !(0.0..=1.0).contains(&weight) || !(sd1 > 0.0) || !(sd2 > 0.0) {
                    return Err(SvarError::Invalid(format!("invalid mixture {d:?}")));
                }
            }
        }
        if let Some(cv) = &self.common_volatility {
            if cv.sigma.len() != self.n() || cv.sigma.iter().any(|s| !(*s > 0.0)) {
                return Err(SvarError::Invalid(
                    "common volatility needs one positive σ per shock".into(),
                ));
            }
            if !(0.0..=1.0).contains(&cv.probability) {
                return Err(SvarError::Invalid("volatility probability outside [0, 1]".into()));
            }
        }
        Ok(())
    }
}

pub fn draw_shocks_with<R: Rng + ?Sized>(spec: &ShockSpec, t: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = spec.n();
    let moments: Vec<(f64, f64)> = spec.distributions.iter().map(|d| d.mean_variance()).collect();
    let vol_scale: Vec<f64> = match &spec.common_volatility {
        Some(cv) => cv
            .sigma
            .iter()
            .map(|s| (cv.probability * s * s + 1.0 - cv.probability).sqrt())
            .collect(),
        None => vec![1.0; n],
    };
    let mut out = DMatrix::zeros(t, n);
    for r in 0..t {
        let psi = spec
            .common_volatility
            .as_ref()
            .map(|cv| rng.random::<f64>() < cv.probability);
        for j in 0..n {
            let mut e = spec.distributions[j].draw(rng);
            if spec.normalize {
                e = (e - moments[j].0) / moments[j].1.sqrt();
            }
            if let (Some(true), Some(cv)) = (psi, &spec.common_volatility) {
                e *= cv.sigma[j];
            }
            if spec.normalize {
                e /= vol_scale[j];
            }
            out[(r, j)] = e;
        }
    }
    Ok(out)
}

/// `t × n` shock matrix from a fresh generator seeded with `seed`.
pub fn draw_shocks(spec: &ShockSpec, t: usize, seed: u64) -> Result<DMatrix<f64>> {
    draw_shocks_with(spec, t, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn mc_b0() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[10., 0., 0., 0., 5., 10., 0., 0., 5., 5., 10., 5., 5., 5., 5., 10.],
    )
}

pub fn mc_lag_matrix() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[0.5, 0., 0., 0., 0.1, 0.5, 0., 0., 0.1, 0.1, 0.5, 0., 0.1, 0.1, 0.1, 0.5],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub b0: DMatrix<f64>,
    pub lags: Vec<DMatrix<f64>>,
    pub shocks: ShockSpec,
    pub t: usize,
    pub burn_in: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpPreset {
    /// Mixture shocks, no lags.
    Mc,
    /// As [`Mc`](Self::Mc) with `b34 = 1`.
    McSmallMisspecification,
    /// VAR(1) with a common Bernoulli volatility regime.
    McLagsCommonVolatility,
    /// `u4 = 5 ε1 + 10 ε4`.
    McProxy,
    /// Listed shocks (zero-based) are Gaussian.
    McGaussian(Vec<usize>),
}

impl DgpPreset {
    pub fn spec(&self, t: usize) -> DgpSpec {
        let n = 4;
        let mut b0 = mc_b0();
        let mut lags = Vec::new();
        let mut shocks = ShockSpec::mixture(n);
        match self {
            DgpPreset::Mc => {}
            DgpPreset::McSmallMisspecification => b0[(2, 3)] = 1.0,
            DgpPreset::McLagsCommonVolatility => {
                lags.push(mc_lag_matrix());
                shocks.common_volatility = Some(CommonVolatility {
                    probability: 0.5,
                    sigma: (1..=n).map(|i| i as f64).collect(),
                });
            }
            DgpPreset::McProxy => {
                b0.set_row(3, &nalgebra::RowDVector::from_row_slice(&[5.0, 0.0, 0.0, 10.0]));
            }
            DgpPreset::McGaussian(g) => shocks = ShockSpec::with_gaussian(n, g),
        }
        DgpSpec {
            b0,
            lags,
            shocks,
            t,
            burn_in: 100,
        }
    }
}

impl fmt::Display for DgpPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DgpPreset::Mc => write!(f, "mc"),
            DgpPreset::McSmallMisspecification => write!(f, "mc-small-misspec"),
            DgpPreset::McLagsCommonVolatility => write!(f, "mc-lags-volatility"),
            DgpPreset::McProxy => write!(f, "mc-proxy"),
            DgpPreset::McGaussian(g) => {
                let list: Vec<String> = g.iter().map(|j| (j + 1).to_string()).collect();
                write!(f, "mc-gauss-{}", list.join("-"))
            }
        }
    }
}

impl FromStr for DgpPreset {
    type Err = SvarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" | "eq-mc" => Ok(DgpPreset::Mc),
            "mc-small-misspec" => Ok(DgpPreset::McSmallMisspecification),
            "mc-lags-volatility" => Ok(DgpPreset::McLagsCommonVolatility),
            "mc-proxy" => Ok(DgpPreset::McProxy),
            _ => {
                if let Some(rest) = s.strip_prefix("mc-gauss-") {
                    let shocks = rest
                        .split('-')
                        .map(|v| match v.parse::<usize>() {
                            Ok(j) if (1..=4).contains(&j) => Ok(j - 1),
                            _ => Err(SvarError::Invalid(format!("bad Gaussian shock index `{v}` in `{s}`"))),
                        })
                        .collect::<Result<Vec<_>>>()?;
                    return Ok(DgpPreset::McGaussian(shocks));
                }
                Err(SvarError::Invalid(format!(
                    "unknown DGP preset `{s}` (expected mc, mc-small-misspec, mc-lags-volatility, mc-proxy or mc-gauss-<k>[-<k>...])"
                )))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestrictionPreset {
    /// `b_ij = 0` for `j > i`, `i ≤ 2`.
    R1,
    /// `b_ij = 0` for `j > i`.
    R2,
    /// A-type counterpart of `R1`.
    AR1,
    /// A-type counterpart of `R2`.
    AR2,
    /// Exogenous proxy in the fourth equation.
    Proxy,
    /// `b12 = b14 = b21 = b23 = b24 = 0`.
    Application,
}

impl FromStr for RestrictionPreset {
    type Err = SvarError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r1" => Ok(RestrictionPreset::R1),
            "r2" => Ok(RestrictionPreset::R2),
            "a-r1" | "ar1" => Ok(RestrictionPreset::AR1),
            "a-r2" | "ar2" => Ok(RestrictionPreset::AR2),
            "proxy" => Ok(RestrictionPreset::Proxy),
            "application" | "oil" => Ok(RestrictionPreset::Application),
            _ => Err(SvarError::Invalid(format!("unknown restriction preset `{s}`"))),
        }
    }
}

pub fn restriction_preset(preset: RestrictionPreset) -> Result<RestrictionSet> {
    use RestrictionTarget::*;
    let upper = |max_row: usize| -> Vec<(usize, usize)> {
        (1..=4)
            .flat_map(|i| (1..=4).map(move |j| (i, j)))
            .filter(|&(i, j)| j > i && i <= max_row)
            .collect()
    };
    let (target, pairs, label) = match preset {
        RestrictionPreset::R1 => (BMatrix, upper(2), "R1"),
        RestrictionPreset::R2 => (BMatrix, upper(4), "R2"),
        RestrictionPreset::AR1 => (AMatrix, upper(2), "A-R1"),
        RestrictionPreset::AR2 => (AMatrix, upper(4), "A-R2"),
        RestrictionPreset::Proxy => (
            BMatrix,
            vec![(1, 4), (2, 4), (3, 4), (4, 2), (4, 3)],
            "proxy",
        ),
        RestrictionPreset::Application => (
            BMatrix,
            vec![(1, 2), (1, 4), (2, 1), (2, 3), (2, 4)],
            "application",
        ),
    };
    RestrictionSet::from_one_based(4, target, pairs, label)
}

/// Simulate `y_t = Σ A_s y_{t-s} + B₀ ε_t` from zero initial values, discarding
/// `burn_in` periods when lags are present. Without lags the panel is `u_t`.
pub fn simulate_svar_with<R: Rng + ?Sized>(dgp: &DgpSpec, rng: &mut R) -> Result<SeriesPanel> {
    let n = dgp.b0.nrows();
    if !dgp.b0.is_square() || dgp.shocks.n() != n || dgp.lags.iter().any(|a| a.shape() != (n, n)) {
        return Err(SvarError::Dimension("DGP matrices do not conform".into()));
    }
    let det = dgp.b0.determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(SvarError::Singular { det: det.abs() });
    }
    if !dgp.lags.is_empty() {
        let mut rf = ReducedForm::white_noise(DMatrix::zeros(1, n));
        rf.p = dgp.lags.len();
        rf.lag_matrices = dgp.lags.clone();
        let radius = spectral_radius(&companion_matrix(&rf));
        if radius >= 1.0 {
            return Err(SvarError::Explosive(radius));
        }
    }
    let burn = if dgp.lags.is_empty() { 0 } else { dgp.burn_in };
    let eps = draw_shocks_with(&dgp.shocks, dgp.t + burn, rng)?;
    let u = eps * dgp.b0.transpose();
    let mut y = DMatrix::zeros(dgp.t + burn, n);
    for t in 0..dgp.t + burn {
        let mut row = u.row(t).transpose();
        for (s, a) in dgp.lags.iter().enumerate() {
            if t > s {
                row += a * y.row(t - s - 1).transpose();
            }
        }
        y.set_row(t, &row.transpose());
    }
    let y = y.rows(burn, dgp.t).into_owned();
    SeriesPanel::from_matrix(y)
}

pub fn simulate_svar(dgp: &DgpSpec, seed: u64) -> Result<SeriesPanel> {
    simulate_svar_with(dgp, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Generator for replication `index` of an experiment with master seed `seed`.
pub fn replication_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RecipeKind {
    Csue,
    Ridge { restrictions: RestrictionSet },
    RidgeWithSelection { restrictions: RestrictionSet, threshold: f64 },
    Recursive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Recipe {
    pub name: String,
    pub kind: RecipeKind,
}

impl Recipe {
    pub fn csue() -> Self {
        Self {
            name: "CSUE".into(),
            kind: RecipeKind::Csue,
        }
    }

    pub fn ridge(rs: RestrictionSet) -> Self {
        Self {
            name: format!("RCSUE({})", rs.description),
            kind: RecipeKind::Ridge { restrictions: rs },
        }
    }

    pub fn ridge_with_selection(rs: RestrictionSet, threshold: f64) -> Self {
        Self {
            name: format!("RCSUE({}, selected)", rs.description),
            kind: RecipeKind::RidgeWithSelection {
                restrictions: rs,
                threshold,
            },
        }
    }

    pub fn recursive() -> Self {
        Self {
            name: "recursive".into(),
            kind: RecipeKind::Recursive,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentBootstrap {
    pub draws: usize,
    pub level: f64,
    /// Keep each replication's selected `λ` in every draw instead of re-running CV.
    pub fix_lambda: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dgp: DgpSpec,
    pub recipes: Vec<Recipe>,
    pub replications: usize,
    pub seed: u64,
    pub cv: CvOptions,
    pub estimator: EstimatorOptions,
    pub bootstrap: Option<ExperimentBootstrap>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeOutcome {
    pub b_hat: DMatrix<f64>,
    pub lambda: Option<f64>,
    /// Position of the selected `λ` in the selection grid.
    pub lambda_index: Option<usize>,
    /// Restrictions kept by the selection step.
    pub kept: Option<Vec<(usize, usize)>>,
    pub lower: Option<DMatrix<f64>>,
    pub upper: Option<DMatrix<f64>>,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    /// `None` where the recipe failed in this replication.
    pub outcomes: Vec<Option<RecipeOutcome>>,
    pub errors: Vec<Option<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElementSummary {
    pub row: usize,
    pub column: usize,
    pub truth: f64,
    pub average: f64,
    pub mse: f64,
    pub coverage: Option<f64>,
    pub width: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecipeSummary {
    pub name: String,
    pub successes: usize,
    pub failures: usize,
    pub elements: Vec<ElementSummary>,
    /// Counts per selection-grid position.
    pub lambda_histogram: Option<Vec<usize>>,
    pub max_lambda_share: Option<f64>,
    /// For each original restriction: share of replications that kept it.
    pub kept_share: Option<Vec<((usize, usize), f64)>>,
}

impl RecipeSummary {
    pub fn element(&self, row: usize, column: usize) -> &ElementSummary {
        &self.elements[row * (self.elements.len() as f64).sqrt() as usize + column]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub replications: usize,
    pub seed: u64,
    pub t: usize,
    pub lambda_grid: Vec<f64>,
    pub recipes: Vec<RecipeSummary>,
    pub records: Vec<ReplicationRecord>,
    /// More than 5% of replications failed for some recipe.
    pub invalid: bool,
}

impl ExperimentReport {
    pub fn recipe(&self, name: &str) -> Option<&RecipeSummary> {
        self.recipes.iter().find(|r| r.name == name)
    }

    /// Tidy rows `element,estimator,T,average,mse,coverage,width`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("element,estimator,T,average,mse,coverage,width\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.recipes {
            for e in &r.elements {
                out.push_str(&format!(
                    "b{}{},{},{},{},{},{},{}\n",
                    e.row + 1,
                    e.column + 1,
                    r.name,
                    self.t,
                    e.average,
                    e.mse,
                    opt(e.coverage),
                    opt(e.width)
                ));
            }
        }
        out
    }

    /// Rows `estimator,grid_index,lambda,count`.
    pub fn lambda_histogram_csv(&self) -> String {
        let mut out = String::from("estimator,grid_index,lambda,count\n");
        for r in &self.recipes {
            if let Some(h) = &r.lambda_histogram {
                for (i, c) in h.iter().enumerate() {
                    out.push_str(&format!("{},{},{},{}\n", r.name, i, self.lambda_grid[i], c));
                }
            }
        }
        out
    }
}

fn var_setup(dgp: &DgpSpec) -> (usize, bool) {
    let p = dgp.lags.len();
    (p, p > 0)
}

fn bands_at_impact(
    panel: &SeriesPanel,
    recipe: EstimatorRecipe,
    point: &EstimationResult,
    boot: &ExperimentBootstrap,
    seed: u64,
    dgp: &DgpSpec,
    cfg_estimator: &EstimatorOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (p, intercept) = var_setup(dgp);
    let opts = BootstrapOptions {
        draws: boot.draws,
        level: boot.level,
        horizon: 0,
        seed,
        parallel: false,
        estimator: cfg_estimator.clone(),
    };
    let bands = bootstrap_bands(panel, p, intercept, &recipe, point, &opts)?;
    let n = point.b_hat.nrows();
    let lower = DMatrix::from_fn(n, n, |i, j| bands.lower[0][(i, j)]);
    let upper = DMatrix::from_fn(n, n, |i, j| bands.upper[0][(i, j)]);
    Ok((lower, upper))
}

fn run_replication(cfg: &ExperimentConfig, ms: &MomentSet, index: usize) -> ReplicationRecord {
    let mut rng = replication_rng(cfg.seed, index);
    let n = cfg.dgp.b0.nrows();
    let mut outcomes = vec![None; cfg.recipes.len()];
    let mut errors = vec![None; cfg.recipes.len()];
    let panel = match simulate_svar_with(&cfg.dgp, &mut rng) {
        Ok(p) => p,
        Err(e) => {
            let msg = Some(e.to_string());
            return ReplicationRecord {
                index,
                outcomes,
                errors: vec![msg; cfg.recipes.len()],
            };
        }
    };
    let cv_seed = rng.next_u64();
    let boot_seed = rng.next_u64();
    let (p, intercept) = var_setup(&cfg.dgp);
    let anchor = LabelingAnchor::identity(n);
    let residuals = match fit_var(&panel, p, intercept) {
        Ok(rf) => rf.residuals,
        Err(e) => {
            let msg = Some(e.to_string());
            return ReplicationRecord {
                index,
                outcomes,
                errors: vec![msg; cfg.recipes.len()],
            };
        }
    };
    let sample = ResidualSample::from_matrix(&residuals);
    let mut csue: Option<EstimationResult> = None;
    let mut cv = cfg.cv.clone();
    cv.seed = cv_seed;
    for (k, recipe) in cfg.recipes.iter().enumerate() {
        let result = (|| -> Result<RecipeOutcome> {
            if !matches!(recipe.kind, RecipeKind::Recursive) && csue.is_none() {
                csue = Some(crate::estimator::csue_on_sample(&sample, ms, &anchor, &cfg.estimator)?);
            }
            let (est, lambda_index, kept, boot_recipe) = match &recipe.kind {
                RecipeKind::Csue => {
                    let est = csue.clone().expect("computed above");
                    (est, None, None, EstimatorRecipe::Csue)
                }
                RecipeKind::Recursive => (estimate_recursive(&residuals)?, None, None, EstimatorRecipe::Recursive),
                RecipeKind::Ridge { restrictions } => {
                    let fit = ridge_pipeline(&sample, ms, &anchor, restrictions, csue.as_ref(), &cv, &cfg.estimator)?;
                    let idx = fit.cv.selected_index;
                    let recipe = EstimatorRecipe::Ridge {
                        restrictions: restrictions.clone(),
                        cv: cv.clone(),
                        fixed_lambda: None,
                    };
                    (fit.ridge, Some(idx), None, recipe)
                }
                RecipeKind::RidgeWithSelection { restrictions, threshold } => {
                    let fit = selection_pipeline(
                        &sample,
                        ms,
                        &anchor,
                        restrictions,
                        *threshold,
                        csue.as_ref(),
                        &cv,
                        &cfg.estimator,
                    )?;
                    let kept: Vec<(usize, usize)> = fit.kept.pairs().to_vec();
                    let idx = fit.fit.as_ref().map(|f| f.cv.selected_index);
                    let est = match fit.fit {
                        Some(f) => f.ridge,
                        None => csue.clone().expect("computed above"),
                    };
                    let recipe = EstimatorRecipe::Ridge {
                        restrictions: fit.kept.clone(),
                        cv: cv.clone(),
                        fixed_lambda: None,
                    };
                    (est, idx, Some(kept), recipe)
                }
            };
            let (lower, upper) = match &cfg.bootstrap {
                Some(boot) => {
                    let recipe = match boot_recipe {
                        EstimatorRecipe::Ridge {
                            restrictions,
                            cv,
                            fixed_lambda: _,
                        } if boot.fix_lambda => EstimatorRecipe::Ridge {
                            restrictions,
                            cv,
                            fixed_lambda: est.lambda,
                        },
                        other => other,
                    };
                    let (l, u) = bands_at_impact(&panel, recipe, &est, boot, boot_seed ^ k as u64, &cfg.dgp, &cfg.estimator)?;
                    (Some(l), Some(u))
                }
                None => (None, None),
            };
            Ok(RecipeOutcome {
                b_hat: est.b_hat.clone(),
                lambda: est.lambda,
                lambda_index,
                kept,
                lower,
                upper,
                converged: est.converged,
            })
        })();
        match result {
            Ok(o) => outcomes[k] = Some(o),
            Err(e) => {
                log::warn!("replication {index}, {}: {e}", recipe.name);
                errors[k] = Some(e.to_string());
            }
        }
    }
    ReplicationRecord {
        index,
        outcomes,
        errors,
    }
}

fn summarize(cfg: &ExperimentConfig, records: &[ReplicationRecord], grid_len: usize) -> Vec<RecipeSummary> {
    let n = cfg.dgp.b0.nrows();
    cfg.recipes
        .iter()
        .enumerate()
        .map(|(k, recipe)| {
            let ok: Vec<&RecipeOutcome> = records.iter().filter_map(|r| r.outcomes[k].as_ref()).collect();
            let m = ok.len().max(1) as f64;
            let mut elements = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    let truth = cfg.dgp.b0[(i, j)];
                    let average = ok.iter().map(|o| o.b_hat[(i, j)]).sum::<f64>() / m;
                    let mse = ok.iter().map(|o| (o.b_hat[(i, j)] - truth).powi(2)).sum::<f64>() / m;
                    let banded: Vec<(f64, f64)> = ok
                        .iter()
                        .filter_map(|o| Some((o.lower.as_ref()?[(i, j)], o.upper.as_ref()?[(i, j)])))
                        .collect();
                    let (coverage, width) = if banded.is_empty() {
                        (None, None)
                    } else {
                        let b = banded.len() as f64;
                        let cov = banded.iter().filter(|(l, u)| *l <= truth && truth <= *u).count() as f64 / b;
                        let w = banded.iter().map(|(l, u)| u - l).sum::<f64>() / b;
                        (Some(cov), Some(w))
                    };
                    elements.push(ElementSummary {
                        row: i,
                        column: j,
                        truth,
                        average,
                        mse,
                        coverage,
                        width,
                    });
                }
            }
            let (lambda_histogram, max_lambda_share) = match recipe.kind {
                RecipeKind::Ridge { .. } | RecipeKind::RidgeWithSelection { .. } => {
                    let mut h = vec![0usize; grid_len];
                    let mut counted = 0usize;
                    for o in &ok {
                        if let Some(ix) = o.lambda_index {
                            h[ix] += 1;
                            counted += 1;
                        }
                    }
                    let share = (counted > 0).then(|| h[grid_len - 1] as f64 / counted as f64);
                    (Some(h), share)
                }
                _ => (None, None),
            };
            let kept_share = match &recipe.kind {
                RecipeKind::RidgeWithSelection { restrictions, .. } => Some(
                    restrictions
                        .pairs()
                        .iter()
                        .map(|&p| {
                            let kept = ok
                                .iter()
                                .filter(|o| o.kept.as_ref().is_some_and(|k| k.contains(&p)))
                                .count();
                            (p, kept as f64 / m)
                        })
                        .collect(),
                ),
                _ => None,
            };
            RecipeSummary {
                name: recipe.name.clone(),
                successes: ok.len(),
                failures: records.len() - ok.len(),
                elements,
                lambda_histogram,
                max_lambda_share,
                kept_share,
            }
        })
        .collect()
}

/// Simulate, estimate every recipe, optionally bootstrap, and aggregate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.replications == 0 {
        return Err(SvarError::Invalid("an experiment needs at least one replication".into()));
    }
    if cfg.recipes.is_empty() {
        return Err(SvarError::Invalid("no estimator recipes given".into()));
    }
    let n = cfg.dgp.b0.nrows();
    let ms = enumerate_moments(n)?;
    let mut records: Vec<ReplicationRecord> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| run_replication(cfg, &ms, r))
        .collect();
    records.sort_by_key(|r| r.index);
    let grid = cfg.cv.grid.values().to_vec();
    let recipes = summarize(cfg, &records, grid.len());
    let invalid = recipes
        .iter()
        .any(|r| r.failures as f64 > 0.05 * cfg.replications as f64);
    if invalid {
        log::warn!("more than 5% of replications failed; report flagged invalid");
    }
    Ok(ExperimentReport {
        replications: cfg.replications,
        seed: cfg.seed,
        t: cfg.dgp.t,
        lambda_grid: grid,
        recipes,
        records,
        invalid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentificationVerdict {
    /// Every near-zero minimum is a sign-permutation of the truth.
    Identified,
    /// The loss does not vary with the rotation.
    RotationFlat,
    /// Some near-zero minimum is not a sign-permutation of the truth.
    NotIdentified,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RotationMinimum {
    pub angles: Vec<f64>,
    pub loss: f64,
    /// Largest deviation from the truth after sign-permutation labeling.
    pub distance_to_truth: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub verdict: IdentificationVerdict,
    pub minima: Vec<RotationMinimum>,
    pub loss_range: (f64, f64),
}

/// Precomputed third and fourth sample moment tensors of whitened data.
struct WhitenedMoments {
    n: usize,
    m3: Vec<f64>,
    m4: Vec<f64>,
    ms: MomentSet,
    weights: DVector<f64>,
}

impl WhitenedMoments {
    fn new(z: &DMatrix<f64>) -> Result<Self> {
        let (t, n) = z.shape();
        let mut m3 = vec![0.0; n.pow(3)];
        let mut m4 = vec![0.0; n.pow(4)];
        for r in 0..t {
            let row: Vec<f64> = (0..n).map(|j| z[(r, j)]).collect();
            for a in 0..n {
                for b in 0..n {
                    let ab = row[a] * row[b];
                    for c in 0..n {
                        let abc = ab * row[c];
                        m3[(a * n + b) * n + c] += abc;
                        for d in 0..n {
                            m4[((a * n + b) * n + c) * n + d] += abc * row[d];
                        }
                    }
                }
            }
        }
        let inv = 1.0 / t as f64;
        m3.iter_mut().for_each(|v| *v *= inv);
        m4.iter_mut().for_each(|v| *v *= inv);
        let ms = enumerate_moments(n)?;
        let weights = normal_variance_weights(&ms);
        Ok(Self { n, m3, m4, ms, weights })
    }

    /// Weighted squared moment conditions of `e = Q' z`; orders 3 and 4 only,
    /// since whitening already zeroes the covariance conditions.
    fn loss(&self, q: &DMatrix<f64>) -> f64 {
        let n = self.n;
        let mode = |tensor: &[f64], order: u32| -> Vec<f64> {
            let mut cur = tensor.to_vec();
            for axis in 0..order {
                let mut next = vec![0.0; cur.len()];
                let stride = n.pow(order - 1 - axis);
                let block = stride * n;
                for (idx, slot) in next.iter_mut().enumerate() {
                    let outer = idx / block;
                    let i = (idx / stride) % n;
                    let inner = idx % stride;
                    let mut s = 0.0;
                    for a in 0..n {
                        s += q[(a, i)] * cur[outer * block + a * stride + inner];
                    }
                    *slot = s;
                }
                cur = next;
            }
            cur
        };
        let t3 = mode(&self.m3, 3);
        let t4 = mode(&self.m4, 4);
        let mut loss = 0.0;
        for (ix, w) in self.ms.indices().iter().zip(self.weights.iter()) {
            if ix.order < 3 {
                continue;
            }
            let mut idx = Vec::with_capacity(4);
            for (v, &m) in ix.powers.iter().enumerate() {
                for _ in 0..m {
                    idx.push(v);
                }
            }
            let value = if ix.order == 3 {
                t3[(idx[0] * n + idx[1]) * n + idx[2]]
            } else {
                t4[((idx[0] * n + idx[1]) * n + idx[2]) * n + idx[3]]
            } - ix.target;
            loss += w * value * value;
        }
        loss
    }
}

fn rotation(n: usize, angles: &[f64]) -> DMatrix<f64> {
    let mut q = DMatrix::identity(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let (s, c) = angles[k].sin_cos();
            let mut g = DMatrix::identity(n, n);
            g[(i, i)] = c;
            g[(j, j)] = c;
            g[(i, j)] = -s;
            g[(j, i)] = s;
            q = q * g;
            k += 1;
        }
    }
    q
}

/// Scan rotations of the whitened residuals of a large simulated sample and
/// classify the minima of the moment loss. `n` must be 2 or 3.
pub fn check_identification(
    b0: &DMatrix<f64>,
    spec: &ShockSpec,
    resolution: usize,
    t_pop: usize,
    seed: u64,
) -> Result<IdentificationReport> {
    let n = b0.nrows();
    if !(2..=3).contains(&n) || spec.n() != n {
        return Err(SvarError::Invalid(format!(
            "identification check supports 2 or 3 shocks, got {n}"
        )));
    }
    if resolution < 8 {
        return Err(SvarError::Invalid("grid resolution must be at least 8".into()));
    }
    let eps = draw_shocks(spec, t_pop, seed)?;
    let u = eps * b0.transpose();
    let sample = ResidualSample::from_matrix(&u);
    let l = crate::estimator::second_moment_cholesky(&sample)?;
    let l_inv = l.clone().try_inverse().ok_or(SvarError::NotPositiveDefinite)?;
    let z = &u * l_inv.transpose();
    let wm = WhitenedMoments::new(&z)?;
    let truth = &l_inv * b0;

    let dims = n * (n - 1) / 2;
    // rotations repeat with period π/2 per angle up to sign-permutations (n = 2);
    // for n = 3 the full cube [0, π)³ is scanned
    let span = if n == 2 {
        std::f64::consts::FRAC_PI_2
    } else {
        std::f64::consts::PI
    };
    let res = if n == 2 { resolution } else { resolution.min(72) };
    let step = span / res as f64;
    let total = res.pow(dims as u32);
    let coords = |mut idx: usize| -> Vec<usize> {
        let mut c = vec![0; dims];
        for slot in c.iter_mut() {
            *slot = idx % res;
            idx /= res;
        }
        c
    };
    let losses: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let angles: Vec<f64> = coords(idx).iter().map(|&c| c as f64 * step).collect();
            wm.loss(&rotation(n, &angles))
        })
        .collect();
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    const FLAT_TOL: f64 = 1e-3;
    if hi - lo < FLAT_TOL {
        return Ok(IdentificationReport {
            verdict: IdentificationVerdict::RotationFlat,
            minima: Vec::new(),
            loss_range: (lo, hi),
        });
    }

    let index_of = |c: &[usize]| -> usize { c.iter().rev().fold(0, |acc, &v| acc * res + v) };
    let mut minima = Vec::new();
    for idx in 0..total {
        let c = coords(idx);
        let v = losses[idx];
        let mut is_min = true;
        'outer: for d in 0..dims {
            for delta in [1, res - 1] {
                let mut nb = c.clone();
                nb[d] = (nb[d] + delta) % res;
                if losses[index_of(&nb)] < v {
                    is_min = false;
                    break 'outer;
                }
            }
        }
        if is_min && v <= lo + 0.05 * (hi - lo) {
            let start: Vec<f64> = c.iter().map(|&v| v as f64 * step).collect();
            let h = 1e-6;
            let refined = minimize(
                |x: &[f64], g: &mut [f64]| {
                    let f0 = wm.loss(&rotation(n, x));
                    let mut xp = x.to_vec();
                    for k in 0..x.len() {
                        xp[k] = x[k] + h;
                        let fp = wm.loss(&rotation(n, &xp));
                        xp[k] = x[k] - h;
                        let fm = wm.loss(&rotation(n, &xp));
                        xp[k] = x[k];
                        g[k] = (fp - fm) / (2.0 * h);
                    }
                    f0
                },
                &start,
                &OptimOptions {
                    restarts: 0,
                    max_iter: 200,
                    ..OptimOptions::default()
                },
            );
            let q = rotation(n, &refined.x);
            let projected = project_to_representative(&(truth.transpose() * &q), &LabelingAnchor::identity(n))?;
            let distance = (projected.matrix - DMatrix::<f64>::identity(n, n)).amax();
            minima.push(RotationMinimum {
                angles: refined.x,
                loss: refined.value,
                distance_to_truth: distance,
            });
        }
    }
    let best = minima.iter().map(|m| m.loss).fold(f64::INFINITY, f64::min);
    let near_zero = |m: &RotationMinimum| m.loss <= best + 0.01 * (hi - lo);
    let identified = minima.iter().filter(|m| near_zero(m)).all(|m| m.distance_to_truth < 2e-2);
    Ok(IdentificationReport {
        verdict: if identified {
            IdentificationVerdict::Identified
        } else {
            IdentificationVerdict::NotIdentified
        },
        minima,
        loss_range: (lo, hi),
    })
}
