//! Repeated two-fold cross-validation over a `λ` grid and the quantile-based
//! selection rule.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvarError};
use crate::estimator::{
    compute_adaptive_weights, csue_on_sample, ridge_on_sample, AdaptiveWeights, EstimationResult,
    EstimatorOptions, Penalty, Problem, RestrictionSet, RestrictionTarget,
};
use crate::inference::quantile;
use crate::labeling::{project_to_representative, LabelingAnchor};
use crate::moments::{
    efficient_weight_matrix_of, normal_variance_weights, sample_moments_of, MomentSet, ResidualSample,
};

/// Strictly increasing, non-negative `λ` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    values: Vec<f64>,
}

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(SvarError::Invalid("empty λ grid".into()));
        }
        if !(values[0] >= 0.0) || values.iter().any(|v| !v.is_finite()) {
            return Err(SvarError::Invalid("λ values must be finite and non-negative".into()));
        }
        if values.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SvarError::Invalid("λ grid must be strictly increasing".into()));
        }
        Ok(Self { values })
    }

    /// `count` values spaced geometrically from `lo` to `hi`.
    pub fn geometric(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo) || count < 2 {
            return Err(SvarError::Invalid(format!(
                "geometric grid needs 0 < lo < hi and at least two points, got {lo}, {hi}, {count}"
            )));
        }
        let step = (hi / lo).ln() / (count - 1) as f64;
        let mut values: Vec<f64> = (0..count).map(|i| lo * (step * i as f64).exp()).collect();
        values[count - 1] = hi;
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

impl Default for LambdaGrid {
    /// 40 values from `1e-4` to `1e3`.
    fn default() -> Self {
        Self::geometric(1e-4, 1e3, 40).expect("valid default grid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    /// Smallest `λ_i` such that every later `λ_j` beats all earlier `λ_h`.
    Literal,
    /// Largest `λ_i` reached by ascending the grid before the first surge.
    Ascent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvOptions {
    pub grid: LambdaGrid,
    pub repetitions: usize,
    pub seed: u64,
    /// Also evaluate `λ = 0` (reported, never selected).
    pub include_zero: bool,
    pub rule: SelectionRule,
    /// Split each repetition into contiguous halves instead of random halves.
    pub contiguous: bool,
    /// A `λ` with infinite losses in at least this share of repetitions is disqualified.
    pub max_failure_share: f64,
    pub fold_weight: FoldWeight,
    pub parallel: bool,
}

/// Weight matrix of the estimation-fold objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldWeight {
    /// Efficient weight from the estimation fold at the full-sample estimate.
    PerFold,
    /// The full-sample efficient weight.
    FullSample,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            grid: LambdaGrid::default(),
            repetitions: 10,
            seed: 0,
            include_zero: true,
            rule: SelectionRule::Ascent,
            contiguous: false,
            max_failure_share: 0.2,
            fold_weight: FoldWeight::PerFold,
            parallel: true,
        }
    }
}

/// Index sets of the two halves of one repetition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPair {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
}

/// Random halves (sizes `⌊T/2⌋` and `⌈T/2⌉`), one pair per repetition.
/// Repetition `r` shuffles with `ChaCha8Rng::seed_from_u64(seed)` on stream `r`.
pub fn make_folds(t: usize, repetitions: usize, seed: u64, contiguous: bool) -> Result<Vec<FoldPair>> {
    if t < 4 {
        return Err(SvarError::InsufficientData(format!("{t} observations cannot be split into folds")));
    }
    Ok((0..repetitions)
        .map(|r| {
            let mut idx: Vec<usize> = (0..t).collect();
            if !contiguous {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                idx.shuffle(&mut rng);
            }
            let mut first = idx[..t / 2].to_vec();
            let mut second = idx[t / 2..].to_vec();
            first.sort_unstable();
            second.sort_unstable();
            FoldPair { first, second }
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub grid: LambdaGrid,
    pub rule: SelectionRule,
    /// Repetition × grid mean let-out loss (average of both directions).
    pub losses: DMatrix<f64>,
    /// Per-repetition loss at `λ = 0` when requested.
    pub zero_losses: Option<Vec<f64>>,
    pub median: Vec<f64>,
    pub q40: Vec<f64>,
    pub q60: Vec<f64>,
    pub disqualified: Vec<bool>,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub selected_lambda: f64,
    pub selected_index: usize,
    /// Neither rule found a `λ`; the grid minimum was used.
    pub fallback: bool,
    pub seed: u64,
    pub folds: Vec<FoldPair>,
    pub failed_cells: usize,
}

impl CvReport {
    /// Rows `lambda,median,q40,q60,disqualified`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("lambda,median,q40,q60,disqualified\n");
        for (i, l) in self.grid.values().iter().enumerate() {
            out.push_str(&format!(
                "{l},{},{},{},{}\n",
                self.median[i], self.q40[i], self.q60[i], self.disqualified[i]
            ));
        }
        out
    }
}

/// Outcome of the selection rule on quantile curves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub index_a: usize,
    pub index_b: usize,
    pub selected: usize,
    pub fallback: bool,
}

/// Apply `rule` to the curves; non-finite medians mark disqualified `λ`.
pub fn select_lambda(median: &[f64], q40: &[f64], q60: &[f64], rule: SelectionRule) -> Result<Selection> {
    let g = median.len();
    if g == 0 || q40.len() != g || q60.len() != g {
        return Err(SvarError::Dimension("loss curves must be non-empty and of equal length".into()));
    }
    if median.iter().all(|m| !m.is_finite()) {
        return Err(SvarError::Invalid("every λ was disqualified in cross-validation".into()));
    }
    // `upper` beats all predecessors in `lower` when it is below their running minimum
    let index = |upper: &[f64], lower: &[f64]| -> Option<usize> {
        match rule {
            SelectionRule::Literal => (0..g).find(|&i| {
                let bound = lower[..i].iter().copied().fold(f64::INFINITY, f64::min);
                upper[i..].iter().all(|&u| u.is_finite() && u < bound)
            }),
            SelectionRule::Ascent => {
                if !upper[0].is_finite() {
                    return None;
                }
                let mut bound = lower[0];
                let mut last = 0;
                for j in 1..g {
                    if !(upper[j].is_finite() && upper[j] < bound) {
                        break;
                    }
                    last = j;
                    bound = bound.min(lower[j]);
                }
                Some(last)
            }
        }
    };
    let a = index(median, q60);
    let b = index(q40, median);
    let (index_a, index_b, fallback) = match (a, b) {
        (Some(a), Some(b)) => (a, b, false),
        (Some(a), None) => (a, a, false),
        (None, Some(b)) => (b, b, false),
        (None, None) => {
            let first = median.iter().position(|m| m.is_finite()).unwrap_or(0);
            (first, first, true)
        }
    };
    Ok(Selection {
        index_a,
        index_b,
        selected: index_a.min(index_b),
        fallback,
    })
}

/// `Σ_k w_k g_k(B)²` on the let-out fold.
fn let_out_loss(b: &DMatrix<f64>, sample: &ResidualSample, ms: &MomentSet, w: &DVector<f64>) -> f64 {
    match sample_moments_of(b, sample, ms) {
        Ok(g) => g.iter().zip(w.iter()).map(|(g, w)| w * g * g).sum(),
        Err(_) => f64::INFINITY,
    }
}

struct FoldPath {
    /// Loss per selection-grid value (largest first order is undone).
    losses: Vec<f64>,
    zero: Option<f64>,
    failed: usize,
}

#[allow(clippy::too_many_arguments)]
fn fold_path(
    est: &ResidualSample,
    out: &ResidualSample,
    ms: &MomentSet,
    anchor: &LabelingAnchor,
    rs: &RestrictionSet,
    aw: &AdaptiveWeights,
    first_step: &EstimationResult,
    opts: &CvOptions,
    est_opts: &EstimatorOptions,
    loss_weights: &DVector<f64>,
) -> FoldPath {
    let g = opts.grid.len();
    let mut losses = vec![f64::INFINITY; g];
    let mut failed = 0;
    let weight = match opts.fold_weight {
        FoldWeight::FullSample => Ok(first_step.weight_matrix.clone()),
        FoldWeight::PerFold => efficient_weight_matrix_of(&first_step.b_hat, est, ms),
    };
    let weight = match weight {
        Ok(w) => w.matrix,
        Err(e) => {
            log::warn!("fold weight matrix failed: {e}");
            return FoldPath {
                losses,
                zero: opts.include_zero.then_some(f64::INFINITY),
                failed: g + opts.include_zero as usize,
            };
        }
    };
    let binding = Penalty::binding(rs);
    fn problem<'a>(est: &'a ResidualSample, ms: &'a MomentSet, weight: &'a DMatrix<f64>, penalty: &'a Penalty) -> Problem<'a> {
        Problem {
            sample: est,
            ms,
            weight,
            scaled: true,
            penalty: Some(penalty),
            variance_penalty: true,
        }
    }
    let mut warm = match problem(est, ms, &weight, &binding).solve(&first_step.b_hat, &est_opts.optim) {
        Ok(s) => Some(s.b),
        Err(e) => {
            log::debug!("binding warm start failed: {e}");
            None
        }
    };
    let mut lambdas: Vec<(Option<usize>, f64)> = opts.grid.values().iter().copied().enumerate().map(|(i, l)| (Some(i), l)).rev().collect();
    if opts.include_zero {
        lambdas.push((None, 0.0));
    }
    let mut zero = None;
    for (slot, lambda) in lambdas {
        let penalty = Penalty::ridge(aw, lambda);
        let p = problem(est, ms, &weight, &penalty);
        let mut best = p.solve(&first_step.b_hat, &est_opts.optim).ok();
        if let Some(start) = &warm {
            if let Ok(alt) = p.solve(start, &est_opts.optim) {
                if best.as_ref().is_none_or(|b| alt.value < b.value) {
                    best = Some(alt);
                }
            }
        }
        let loss = match best {
            Some(s) => {
                let b = match project_to_representative(&s.b, anchor) {
                    Ok(proj) => proj.matrix,
                    Err(_) => s.b,
                };
                let l = let_out_loss(&b, out, ms, loss_weights);
                warm = Some(b);
                l
            }
            None => {
                log::warn!("fold optimization failed at λ = {lambda:e}");
                f64::INFINITY
            }
        };
        if !loss.is_finite() {
            failed += 1;
        }
        match slot {
            Some(i) => losses[i] = loss,
            None => zero = Some(loss),
        }
    }
    FoldPath { losses, zero, failed }
}

/// Cross-validated let-out losses along the grid and the selected `λ`.
/// `first_step` is the full-sample unpenalized estimate; `aw` its adaptive weights.
pub fn cv_path(
    sample: &ResidualSample,
    ms: &MomentSet,
    anchor: &LabelingAnchor,
    rs: &RestrictionSet,
    aw: &AdaptiveWeights,
    first_step: &EstimationResult,
    opts: &CvOptions,
    est_opts: &EstimatorOptions,
) -> Result<CvReport> {
    if opts.repetitions == 0 {
        return Err(SvarError::Invalid("cross-validation needs at least one repetition".into()));
    }
    if sample.len() < 20 {
        return Err(SvarError::InsufficientData(format!(
            "{} observations are too few for two-fold cross-validation",
            sample.len()
        )));
    }
    let aw = aw.restricted_to(rs);
    let folds = make_folds(sample.len(), opts.repetitions, opts.seed, opts.contiguous)?;
    let loss_weights = normal_variance_weights(ms);
    let run = |pair: &FoldPair| -> (Vec<f64>, Option<f64>, usize) {
        let a = sample.subset(&pair.first);
        let b = sample.subset(&pair.second);
        let one = fold_path(&a, &b, ms, anchor, rs, &aw, first_step, opts, est_opts, &loss_weights);
        let two = fold_path(&b, &a, ms, anchor, rs, &aw, first_step, opts, est_opts, &loss_weights);
        let mean: Vec<f64> = one.losses.iter().zip(&two.losses).map(|(x, y)| 0.5 * (x + y)).collect();
        let zero = one.zero.zip(two.zero).map(|(x, y)| 0.5 * (x + y));
        (mean, zero, one.failed + two.failed)
    };
    let rows: Vec<(Vec<f64>, Option<f64>, usize)> = if opts.parallel {
        folds.par_iter().map(run).collect()
    } else {
        folds.iter().map(run).collect()
    };
    let g = opts.grid.len();
    let reps = opts.repetitions;
    let losses = DMatrix::from_fn(reps, g, |r, c| rows[r].0[c]);
    let zero_losses = opts.include_zero.then(|| rows.iter().map(|r| r.1.unwrap_or(f64::INFINITY)).collect());
    let failed_cells = rows.iter().map(|r| r.2).sum();

    let mut median = vec![f64::INFINITY; g];
    let mut q40 = vec![f64::INFINITY; g];
    let mut q60 = vec![f64::INFINITY; g];
    let mut disqualified = vec![false; g];
    for c in 0..g {
        let mut finite: Vec<f64> = losses.column(c).iter().copied().filter(|v| v.is_finite()).collect();
        let bad = reps - finite.len();
        if finite.is_empty() || bad as f64 >= opts.max_failure_share * reps as f64 && bad > 0 {
            disqualified[c] = true;
            continue;
        }
        finite.sort_by(f64::total_cmp);
        median[c] = quantile(&finite, 0.5);
        q40[c] = quantile(&finite, 0.4);
        q60[c] = quantile(&finite, 0.6);
    }
    let sel = select_lambda(&median, &q40, &q60, opts.rule)?;
    if sel.fallback {
        log::warn!("no λ satisfied the selection rule; using the smallest qualified grid value");
    }
    let values = opts.grid.values();
    let report = CvReport {
        grid: opts.grid.clone(),
        rule: opts.rule,
        losses,
        zero_losses,
        median,
        q40,
        q60,
        disqualified,
        lambda_a: values[sel.index_a],
        lambda_b: values[sel.index_b],
        selected_lambda: values[sel.selected],
        selected_index: sel.selected,
        fallback: sel.fallback,
        seed: opts.seed,
        folds,
        failed_cells,
    };
    debug_assert_eq!(report.selected_lambda, report.lambda_a.min(report.lambda_b));
    Ok(report)
}

/// Full-sample CSUE, adaptive weights, cross-validation and the ridge fit at the selected `λ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeFit {
    pub csue: EstimationResult,
    pub weights: AdaptiveWeights,
    pub cv: CvReport,
    pub ridge: EstimationResult,
}

/// Run weights, CV and the final ridge fit. A precomputed CSUE fit is reused.
#[allow(clippy::too_many_arguments)]
pub fn ridge_pipeline(
    sample: &ResidualSample,
    ms: &MomentSet,
    anchor: &LabelingAnchor,
    rs: &RestrictionSet,
    csue: Option<&EstimationResult>,
    cv: &CvOptions,
    est_opts: &EstimatorOptions,
) -> Result<RidgeFit> {
    let csue = match csue {
        Some(c) => c.clone(),
        None => csue_on_sample(sample, ms, anchor, est_opts)?,
    };
    let weights = compute_adaptive_weights(&csue, rs)?;
    let report = cv_path(sample, ms, anchor, rs, &weights, &csue, cv, est_opts)?;
    let ridge = ridge_on_sample(sample, ms, anchor, rs, report.selected_lambda, &weights, &csue, est_opts)?;
    Ok(RidgeFit {
        csue,
        weights,
        cv: report,
        ridge,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionFit {
    pub initial: RidgeFit,
    pub kept: RestrictionSet,
    pub dropped: Vec<(usize, usize)>,
    /// `None` when every restriction was dropped; the estimate is then the CSUE fit.
    pub fit: Option<RidgeFit>,
}

impl SelectionFit {
    pub fn estimate(&self) -> &EstimationResult {
        match &self.fit {
            Some(f) => &f.ridge,
            None => &self.initial.csue,
        }
    }
}

/// Ridge pipeline, then keep only restrictions whose estimated element is
/// below `threshold` in absolute value (on `B̂`, or `Â = B̂⁻¹` for A-type sets)
/// and rerun the pipeline with the kept subset.
#[allow(clippy::too_many_arguments)]
pub fn selection_pipeline(
    sample: &ResidualSample,
    ms: &MomentSet,
    anchor: &LabelingAnchor,
    rs: &RestrictionSet,
    threshold: f64,
    csue: Option<&EstimationResult>,
    cv: &CvOptions,
    est_opts: &EstimatorOptions,
) -> Result<SelectionFit> {
    if !(threshold > 0.0) {
        return Err(SvarError::Invalid(format!("selection threshold must be positive, got {threshold}")));
    }
    let initial = ridge_pipeline(sample, ms, anchor, rs, csue, cv, est_opts)?;
    let target = match rs.target {
        RestrictionTarget::BMatrix => initial.ridge.b_hat.clone(),
        RestrictionTarget::AMatrix => rs.targeted_matrix(&initial.ridge.b_hat)?,
    };
    let kept = rs.retain(|(i, j)| target[(i, j)].abs() < threshold);
    let dropped: Vec<(usize, usize)> = rs.pairs().iter().copied().filter(|&p| !kept.contains(p)).collect();
    let fit = if kept.is_empty() {
        None
    } else if dropped.is_empty() {
        Some(initial.clone())
    } else {
        Some(ridge_pipeline(sample, ms, anchor, &kept, Some(&initial.csue), cv, est_opts)?)
    };
    Ok(SelectionFit {
        initial,
        kept,
        dropped,
        fit,
    })
}

/// [`selection_pipeline`] on a residual matrix, returning the final estimate.
#[allow(clippy::too_many_arguments)]
pub fn estimate_with_selection(
    residuals: &DMatrix<f64>,
    ms: &MomentSet,
    anchor: &LabelingAnchor,
    rs: &RestrictionSet,
    threshold: f64,
    cv: &CvOptions,
    est_opts: &EstimatorOptions,
) -> Result<EstimationResult> {
    let sample = ResidualSample::from_matrix(residuals);
    Ok(selection_pipeline(&sample, ms, anchor, rs, threshold, None, cv, est_opts)?
        .estimate()
        .clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::enumerate_moments;
    use crate::simulation::tests_support::mc_residuals;
    use crate::simulation::{restriction_preset, RestrictionPreset};
    use proptest::prelude::*;

    #[test]
    fn folds_partition_the_sample() {
        let f = make_folds(10, 1, 3, false).unwrap();
        assert_eq!(f[0].first.len(), 5);
        assert_eq!(f[0].second.len(), 5);
        let mut all: Vec<usize> = f[0].first.iter().chain(&f[0].second).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(make_folds(10, 1, 3, false).unwrap(), f);
        let c = make_folds(9, 1, 0, true).unwrap();
        assert_eq!(c[0].first, vec![0, 1, 2, 3]);
    }

    #[test]
    fn repetitions_are_distinct() {
        let f = make_folds(100, 10, 1, false).unwrap();
        for i in 0..10 {
            for j in 0..i {
                assert_ne!(f[i].first, f[j].first);
                assert_ne!(f[i].first, f[j].second);
            }
        }
    }

    #[test]
    fn grid_validation_and_default() {
        assert!(LambdaGrid::new(vec![0.0, 1.0, 1.0]).is_err());
        assert!(LambdaGrid::new(vec![-1.0, 1.0]).is_err());
        let g = LambdaGrid::default();
        assert_eq!(g.len(), 40);
        assert!((g.values()[0] - 1e-4).abs() < 1e-18 && g.max() == 1e3);
    }

    #[test]
    fn literal_rule_on_constant_curves_takes_the_minimum() {
        let c = vec![1.0; 6];
        let s = select_lambda(&c, &c, &c, SelectionRule::Literal).unwrap();
        assert_eq!(s.selected, 0);
        let median: Vec<f64> = (0..6).map(|i| 6.0 - i as f64).collect();
        let q60: Vec<f64> = median.iter().map(|m| m + 0.5).collect();
        let q40: Vec<f64> = median.iter().map(|m| m - 0.5).collect();
        let s = select_lambda(&median, &q40, &q60, SelectionRule::Literal).unwrap();
        assert_eq!(s.index_a, 0);
    }

    fn surge_curves(surge: usize, g: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let median: Vec<f64> = (0..g)
            .map(|i| if i <= surge { 1.0 - 0.001 * i as f64 } else { 5.0 + i as f64 })
            .collect();
        let q40 = median.iter().map(|m| m - 0.05).collect();
        let q60 = median.iter().map(|m| m + 0.05).collect();
        (median, q40, q60)
    }

    #[test]
    fn surge_bounds_the_selection() {
        let (m, l, h) = surge_curves(25, 40);
        for rule in [SelectionRule::Literal, SelectionRule::Ascent] {
            let s = select_lambda(&m, &l, &h, rule).unwrap();
            assert!(s.selected <= 25, "{rule:?}: {}", s.selected);
        }
        let s = select_lambda(&m, &l, &h, SelectionRule::Ascent).unwrap();
        assert_eq!(s.selected, 25);
    }

    #[test]
    fn ascent_takes_the_maximum_on_flat_decreasing_curves() {
        let (m, l, h) = surge_curves(39, 40);
        let s = select_lambda(&m, &l, &h, SelectionRule::Ascent).unwrap();
        assert_eq!((s.index_a, s.index_b, s.selected), (39, 39, 39));
    }

    #[test]
    fn disqualified_values_stop_the_ascent() {
        let (mut m, l, h) = surge_curves(39, 40);
        m[10] = f64::INFINITY;
        let s = select_lambda(&m, &l, &h, SelectionRule::Ascent).unwrap();
        assert_eq!(s.selected, 9);
        let all = vec![f64::INFINITY; 3];
        assert!(select_lambda(&all, &all, &all, SelectionRule::Ascent).is_err());
    }

    proptest! {
        #[test]
        fn selected_is_min_of_both_rules(vals in proptest::collection::vec(0.1f64..10.0, 3..20), spread in 0.0f64..1.0) {
            let q40: Vec<f64> = vals.iter().map(|v| v - spread).collect();
            let q60: Vec<f64> = vals.iter().map(|v| v + spread).collect();
            for rule in [SelectionRule::Literal, SelectionRule::Ascent] {
                let s = select_lambda(&vals, &q40, &q60, rule).unwrap();
                prop_assert_eq!(s.selected, s.index_a.min(s.index_b));
                prop_assert!(s.selected < vals.len());
            }
        }
    }

    fn small_cv() -> CvOptions {
        CvOptions {
            grid: LambdaGrid::geometric(1e-2, 1e2, 5).unwrap(),
            repetitions: 2,
            seed: 11,
            ..CvOptions::default()
        }
    }

    #[test]
    fn zero_column_matches_unpenalized_fold_fits() {
        let (u, _) = mc_residuals(300, 21);
        let sample = ResidualSample::from_matrix(&u);
        let ms = enumerate_moments(4).unwrap();
        let anchor = LabelingAnchor::identity(4);
        let opts = EstimatorOptions::default();
        let first = csue_on_sample(&sample, &ms, &anchor, &opts).unwrap();
        let rs = RestrictionSet::empty(RestrictionTarget::BMatrix);
        let aw = compute_adaptive_weights(&first, &rs).unwrap();
        let cv = CvOptions {
            repetitions: 1,
            parallel: false,
            ..small_cv()
        };
        let report = cv_path(&sample, &ms, &anchor, &rs, &aw, &first, &cv, &opts).unwrap();
        let pair = &report.folds[0];
        let w = normal_variance_weights(&ms);
        let direct = |est: &[usize], out: &[usize]| {
            let e = sample.subset(est);
            let o = sample.subset(out);
            let weight = efficient_weight_matrix_of(&first.b_hat, &e, &ms).unwrap().matrix;
            let p = Penalty::ridge(&aw, 0.0);
            let s = Problem {
                sample: &e,
                ms: &ms,
                weight: &weight,
                scaled: true,
                penalty: Some(&p),
                variance_penalty: true,
            }
            .solve(&first.b_hat, &opts.optim)
            .unwrap();
            let_out_loss(&s.b, &o, &ms, &w)
        };
        let expected = 0.5 * (direct(&pair.first, &pair.second) + direct(&pair.second, &pair.first));
        let got = report.zero_losses.as_ref().unwrap()[0];
        assert!((got - expected).abs() <= 1e-6 * expected.abs().max(1e-12), "{got} vs {expected}");
        // without restrictions every λ gives the same problem
        for c in 0..report.grid.len() {
            assert!((report.losses[(0, c)] - expected).abs() <= 1e-6 * expected, "column {c}");
        }
    }

    #[test]
    fn cv_is_deterministic_and_parallel_invariant() {
        let (u, _) = mc_residuals(250, 5);
        let sample = ResidualSample::from_matrix(&u);
        let ms = enumerate_moments(4).unwrap();
        let anchor = LabelingAnchor::identity(4);
        let opts = EstimatorOptions::default();
        let first = csue_on_sample(&sample, &ms, &anchor, &opts).unwrap();
        let rs = restriction_preset(RestrictionPreset::R1).unwrap();
        let aw = compute_adaptive_weights(&first, &rs).unwrap();
        let a = cv_path(&sample, &ms, &anchor, &rs, &aw, &first, &small_cv(), &opts).unwrap();
        let b = cv_path(
            &sample,
            &ms,
            &anchor,
            &rs,
            &aw,
            &first,
            &CvOptions {
                parallel: false,
                ..small_cv()
            },
            &opts,
        )
        .unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.selected_lambda, b.selected_lambda);
        assert_eq!(a.selected_lambda, a.lambda_a.min(a.lambda_b));
    }

    #[test]
    fn selection_keeps_correct_restrictions() {
        let (u, _) = mc_residuals(500, 8);
        let sample = ResidualSample::from_matrix(&u);
        let ms = enumerate_moments(4).unwrap();
        let anchor = LabelingAnchor::identity(4);
        let rs = restriction_preset(RestrictionPreset::R1).unwrap();
        let opts = EstimatorOptions::default();
        let fit = selection_pipeline(&sample, &ms, &anchor, &rs, 0.5, None, &small_cv(), &opts).unwrap();
        assert!(fit.dropped.is_empty(), "dropped {:?}", fit.dropped);
        assert_eq!(fit.estimate().b_hat, fit.initial.ridge.b_hat);
    }

    #[test]
    fn empty_selection_returns_csue() {
        let (u, _) = mc_residuals(300, 9);
        let sample = ResidualSample::from_matrix(&u);
        let ms = enumerate_moments(4).unwrap();
        let anchor = LabelingAnchor::identity(4);
        // b21 = 5 in truth, so its ridge estimate clears any small threshold
        let rs = RestrictionSet::from_one_based(4, RestrictionTarget::BMatrix, [(2, 1)], "false").unwrap();
        let fit = selection_pipeline(&sample, &ms, &anchor, &rs, 0.5, None, &small_cv(), &EstimatorOptions::default()).unwrap();
        assert_eq!(fit.dropped, vec![(1, 0)]);
        assert!(fit.fit.is_none());
        assert_eq!(fit.estimate().b_hat, fit.initial.csue.b_hat);
    }
}
