//! Command-line driver: run configuration, CSV ingestion and the `estimate`,
//! `simulate`, `cv`, `bootstrap`, `report` and `check-ident` commands.
//!
//! Every command writes plain CSV/JSON artifacts into the output directory
//! together with `resolved_config.toml`, which reproduces the run when passed
//! back through `--config`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SvarError};
use crate::estimator::{
    compute_adaptive_weights, estimate_csue, estimate_recursive, to_a_type_report, AdaptiveWeights,
    EstimationResult, EstimatorOptions, RestrictionSet, RestrictionTarget,
};
use crate::inference::{
    bootstrap_bands, fevd_csv, fevd_table, historical_csv, historical_decomposition, impulse_responses, irf_csv,
    quantile, shock_diagnostics, BootstrapBands, BootstrapOptions, EstimatorRecipe, FevdTable,
};
use crate::labeling::LabelingAnchor;
use crate::moments::{enumerate_moments, ResidualSample};
use crate::simulation::{
    check_identification, restriction_preset, run_experiment, simulate_svar, DgpPreset, ExperimentBootstrap,
    ExperimentConfig, ExperimentReport, IdentificationReport, Recipe, RestrictionPreset, ShockDistribution,
    ShockSpec,
};
use crate::tuning::{cv_path, ridge_pipeline, selection_pipeline, CvOptions, CvReport, LambdaGrid};
use crate::var_reduced::{fit_var, ReducedForm, SeriesPanel};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "RIDGESVAR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ridgesvar", version, about = "Non-Gaussian SVAR estimation with ridge shrinkage toward zero restrictions")]
pub struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Full pipeline: VAR, recursive anchor, CSUE, adaptive weights, CV, ridge, bootstrap, reports.
    Estimate(RunArgs),
    /// Monte Carlo experiment over one or more sample sizes.
    Simulate(RunArgs),
    /// Cross-validation curves only.
    Cv(RunArgs),
    /// Bootstrap bands for the recursive, CSUE and final estimators.
    Bootstrap(RunArgs),
    /// Re-render tidy CSVs from a result directory.
    Report {
        /// Directory written by a previous command.
        dir: PathBuf,
    },
    /// Rotation scan of a large simulated sample (2 or 3 shocks).
    CheckIdent(IdentArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Monthly oil and stock market application with four variables.
    Application,
    /// Desk-scale rerun of the baseline Monte Carlo table.
    Table1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    /// `100 · ln(x)`.
    Log100,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
pub enum Target {
    #[default]
    #[serde(rename = "B")]
    #[value(name = "b", alias = "B")]
    B,
    #[serde(rename = "A")]
    #[value(name = "a", alias = "A")]
    A,
}

/// Resolved run configuration. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub data: Option<PathBuf>,
    pub dgp: Option<String>,
    /// Sample sizes for DGP runs; `estimate` and `cv` use the first.
    pub sample_sizes: Vec<usize>,
    /// VAR lag order; defaults to 12 for data and to the DGP's own order.
    pub lags: Option<usize>,
    pub intercept: bool,
    /// Column name to transform.
    pub transforms: BTreeMap<String, Transform>,
    /// Restriction presets (`r1`, `r2`, `a-r1`, `a-r2`, `proxy`, `application`).
    pub restrictions: Vec<String>,
    /// Explicit one-based `(row, column)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub target: Target,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_count: usize,
    pub cv_repetitions: usize,
    /// Selection-step threshold; off when absent.
    pub threshold: Option<f64>,
    pub draws: usize,
    pub level: f64,
    /// Keep the point-estimate `λ` in every bootstrap draw.
    pub bootstrap_fix_lambda: bool,
    pub horizon: usize,
    pub fevd_horizon: usize,
    /// One-based `(equation row, normalizing variable)` pairs for the A-type report.
    pub a_type_equations: Vec<(usize, usize)>,
    pub replications: usize,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            data: None,
            dgp: None,
            sample_sizes: vec![1000],
            lags: None,
            intercept: true,
            transforms: BTreeMap::new(),
            restrictions: Vec::new(),
            pairs: Vec::new(),
            target: Target::B,
            lambda_min: 1e-4,
            lambda_max: 1e3,
            lambda_count: 40,
            cv_repetitions: 10,
            threshold: None,
            draws: 500,
            level: 0.68,
            bootstrap_fix_lambda: false,
            horizon: 20,
            fevd_horizon: 12,
            a_type_equations: Vec::new(),
            replications: 100,
            seed: 0,
            output: PathBuf::from("ridgesvar-out"),
        }
    }
}

fn preset_table(preset: Preset) -> toml::Table {
    let text = match preset {
        Preset::Application => {
            r#"
lags = 12
intercept = true
restrictions = ["application"]
cv_repetitions = 50
draws = 500
horizon = 48
fevd_horizon = 12
a_type_equations = [[1, 1], [2, 2], [3, 1], [4, 4]]
"#
        }
        Preset::Table1 => {
            r#"
dgp = "mc"
sample_sizes = [250, 500, 1000]
restrictions = ["r1", "r2"]
replications = 200
draws = 0
"#
        }
    };
    text.parse().expect("preset tables parse")
}

/// Flag overrides shared by the pipeline commands.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// CSV panel: time stamp column followed by numeric columns.
    #[arg(long, conflicts_with = "dgp")]
    pub data: Option<PathBuf>,
    /// DGP preset (mc, mc-small-misspec, mc-lags-volatility, mc-proxy, mc-gauss-<k>...).
    #[arg(long)]
    pub dgp: Option<String>,
    /// Sample sizes, comma separated.
    #[arg(long = "t", value_delimiter = ',')]
    pub sample_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub lags: Option<usize>,
    #[arg(long)]
    pub no_intercept: bool,
    /// Columns to transform as 100·ln(x), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub log100: Option<Vec<String>>,
    /// Restriction presets, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub restrictions: Option<Vec<String>>,
    /// One-based pairs like `1,2;2,1`.
    #[arg(long)]
    pub pairs: Option<String>,
    #[arg(long, value_enum)]
    pub target: Option<Target>,
    #[arg(long)]
    pub lambda_min: Option<f64>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub lambda_count: Option<usize>,
    #[arg(long)]
    pub cv_reps: Option<usize>,
    /// Selection step with threshold 0.5 unless `--threshold` is given.
    #[arg(long)]
    pub select: bool,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub fix_lambda: bool,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub fevd_horizon: Option<usize>,
    /// One-based `row,variable` pairs like `1,1;3,1`.
    #[arg(long)]
    pub a_type: Option<String>,
    #[arg(long)]
    pub replications: Option<usize>,
    /// Full-scale Monte Carlo: 2000 replications (many CPU hours).
    #[arg(long, conflicts_with = "replications")]
    pub full: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short = 'o')]
    pub out: Option<PathBuf>,
}

/// Selection-step threshold used by `--select`.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Replication count of the full-scale Monte Carlo tables.
pub const FULL_REPLICATIONS: usize = 2000;

fn parse_pairs(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let parts: Vec<&str> = item.split(',').map(str::trim).collect();
            match parts.as_slice() {
                [a, b] => match (a.parse(), b.parse()) {
                    (Ok(a), Ok(b)) => Ok((a, b)),
                    _ => Err(SvarError::Invalid(format!("bad pair `{item}`"))),
                },
                _ => Err(SvarError::Invalid(format!("bad pair `{item}` (expected `row,column`)"))),
            }
        })
        .collect()
}

impl RunConfig {
    /// Defaults, then the preset, then the file, then flags.
    pub fn resolve(args: &RunArgs) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default())
            .map_err(|e| SvarError::Invalid(format!("default configuration: {e}")))?;
        let file: Option<toml::Table> = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                Some(
                    text.parse()
                        .map_err(|e| SvarError::Invalid(format!("{}: {e}", path.display())))?,
                )
            }
            None => None,
        };
        let preset = match args.preset {
            Some(p) => Some(p),
            None => match file.as_ref().and_then(|f| f.get("preset")) {
                Some(v) => Some(
                    Preset::deserialize(v.clone())
                        .map_err(|e| SvarError::Invalid(format!("preset: {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(p) = preset {
            table.extend(preset_table(p));
        }
        if let Some(f) = file {
            table.extend(f);
        }
        table.remove("preset");
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e| SvarError::Invalid(format!("configuration: {e}")))?;
        cfg.apply(args)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, a: &RunArgs) -> Result<()> {
        if let Some(d) = &a.data {
            self.data = Some(d.clone());
            self.dgp = None;
        }
        if let Some(d) = &a.dgp {
            self.dgp = Some(d.clone());
            self.data = None;
        }
        if let Some(t) = &a.sample_sizes {
            self.sample_sizes = t.clone();
        }
        if a.lags.is_some() {
            self.lags = a.lags;
        }
        if a.no_intercept {
            self.intercept = false;
        }
        if let Some(cols) = &a.log100 {
            for c in cols {
                self.transforms.insert(c.clone(), Transform::Log100);
            }
        }
        if let Some(r) = &a.restrictions {
            self.restrictions = r.clone();
        }
        if let Some(p) = &a.pairs {
            self.pairs = parse_pairs(p)?;
        }
        if let Some(t) = a.target {
            self.target = t;
        }
        macro_rules! set {
            ($field:ident, $flag:ident) => {
                if let Some(v) = a.$flag {
                    self.$field = v;
                }
            };
        }
        set!(lambda_min, lambda_min);
        set!(lambda_max, lambda_max);
        set!(lambda_count, lambda_count);
        set!(cv_repetitions, cv_reps);
        set!(draws, draws);
        set!(level, level);
        set!(horizon, horizon);
        set!(fevd_horizon, fevd_horizon);
        set!(replications, replications);
        if a.full {
            log::warn!(
                "--full runs {FULL_REPLICATIONS} replications per sample size; expect many CPU hours"
            );
            self.replications = FULL_REPLICATIONS;
        }
        set!(seed, seed);
        if a.threshold.is_some() {
            self.threshold = a.threshold;
        } else if a.select && self.threshold.is_none() {
            self.threshold = Some(DEFAULT_THRESHOLD);
        }
        if a.fix_lambda {
            self.bootstrap_fix_lambda = true;
        }
        if let Some(e) = &a.a_type {
            self.a_type_equations = parse_pairs(e)?;
        }
        if let Some(o) = &a.out {
            self.output = o.clone();
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SvarError::Invalid(m));
        match (&self.data, &self.dgp) {
            (Some(_), Some(_)) | (None, None) => return bad("set exactly one of `data` and `dgp`".into()),
            (None, Some(d)) => {
                d.parse::<DgpPreset>()?;
            }
            _ => {}
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return bad("sample sizes must be positive".into());
        }
        if self.cv_repetitions == 0 || self.replications == 0 || self.horizon == 0 || self.fevd_horizon == 0 {
            return bad("cv_repetitions, replications, horizon and fevd_horizon must be positive".into());
        }
        if self.lambda_count == 0 {
            return bad("lambda_count must be positive".into());
        }
        if self.lambda_count > 1 && !(self.lambda_min > 0.0 && self.lambda_max > self.lambda_min) {
            return bad("λ grid needs 0 < lambda_min < lambda_max".into());
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad(format!("level must be in (0, 1), got {}", self.level));
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0) {
                return bad(format!("threshold must be positive, got {t}"));
            }
        }
        for r in &self.restrictions {
            r.parse::<RestrictionPreset>()?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SvarError::Invalid(format!("serializing configuration: {e}")))
    }

    fn grid(&self) -> Result<LambdaGrid> {
        if self.lambda_count == 1 {
            LambdaGrid::new(vec![self.lambda_max])
        } else {
            LambdaGrid::geometric(self.lambda_min, self.lambda_max, self.lambda_count)
        }
    }

    fn cv_options(&self) -> Result<CvOptions> {
        Ok(CvOptions {
            grid: self.grid()?,
            repetitions: self.cv_repetitions,
            seed: self.seed,
            ..CvOptions::default()
        })
    }

    /// Only `λ = 0` on the grid: the ridge step reduces to the unpenalized fit.
    fn ridge_disabled(&self) -> bool {
        self.lambda_count == 1 && self.lambda_max == 0.0
    }

    fn restriction_sets(&self, n: usize) -> Result<Vec<RestrictionSet>> {
        let mut sets = Vec::new();
        for name in &self.restrictions {
            let rs = restriction_preset(name.parse()?)?;
            if rs.targeted_matrix(&DMatrix::identity(n, n)).is_err() || rs.pairs().iter().any(|&(i, j)| i >= n || j >= n) {
                return Err(SvarError::Invalid(format!("restriction preset `{name}` does not fit {n} variables")));
            }
            sets.push(rs);
        }
        if !self.pairs.is_empty() {
            let target = match self.target {
                Target::B => RestrictionTarget::BMatrix,
                Target::A => RestrictionTarget::AMatrix,
            };
            sets.push(RestrictionSet::from_one_based(n, target, self.pairs.iter().copied(), "custom")?);
        }
        Ok(sets)
    }

    /// The single restriction set of a pipeline run, if any.
    fn single_restriction_set(&self, n: usize) -> Result<Option<RestrictionSet>> {
        let mut sets = self.restriction_sets(n)?;
        match sets.len() {
            0 => Ok(None),
            1 => Ok(sets.pop()),
            k => Err(SvarError::Invalid(format!(
                "this command takes one restriction set, got {k}"
            ))),
        }
    }
}

/// Read a panel: header row, first column time stamps, numeric columns after.
pub fn load_csv(path: &Path, transforms: &BTreeMap<String, Transform>) -> Result<SeriesPanel> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.len() < 2 {
        return Err(SvarError::Parse {
            line: 1,
            column: headers.len(),
            message: "need a time stamp column and at least one series".into(),
        });
    }
    let names: Vec<String> = headers[1..].to_vec();
    for key in transforms.keys() {
        if !names.contains(key) {
            return Err(SvarError::Invalid(format!("transform names unknown column `{key}`")));
        }
    }
    let column_transform: Vec<Transform> = names
        .iter()
        .map(|n| transforms.get(n).copied().unwrap_or_default())
        .collect();
    let mut times = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != headers.len() {
            return Err(SvarError::Parse {
                line,
                column: record.len(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        times.push(record[0].to_string());
        for (c, cell) in record.iter().enumerate().skip(1) {
            let missing = cell.is_empty() || matches!(cell.to_ascii_lowercase().as_str(), "na" | "nan" | "." | "null");
            if missing {
                return Err(SvarError::Parse {
                    line,
                    column: c + 1,
                    message: format!("missing value for `{}`", headers[c]),
                });
            }
            let x: f64 = cell.parse().map_err(|_| SvarError::Parse {
                line,
                column: c + 1,
                message: format!("`{cell}` is not a number"),
            })?;
            let v = match column_transform[c - 1] {
                Transform::None => x,
                Transform::Log100 => {
                    if !(x > 0.0) {
                        return Err(SvarError::Parse {
                            line,
                            column: c + 1,
                            message: format!("log of non-positive value {x}"),
                        });
                    }
                    100.0 * x.ln()
                }
            };
            if !v.is_finite() {
                return Err(SvarError::Parse {
                    line,
                    column: c + 1,
                    message: format!("non-finite value `{cell}`"),
                });
            }
            values.push(v);
        }
    }
    if times.is_empty() {
        return Err(SvarError::InsufficientData(format!("{} has no data rows", path.display())));
    }
    warn_if_not_monotone(&times);
    let n = names.len();
    let obs = DMatrix::from_row_slice(times.len(), n, &values);
    SeriesPanel::new(obs, names, times)
}

fn warn_if_not_monotone(times: &[String]) {
    let numeric: Option<Vec<f64>> = times.iter().map(|t| t.parse().ok()).collect();
    let ordered = match numeric {
        Some(v) => v.windows(2).all(|w| w[1] > w[0]),
        None => times.windows(2).all(|w| w[1] > w[0]),
    };
    if !ordered {
        log::warn!("time stamps are not strictly increasing");
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write(dir, name, &serde_json::to_string_pretty(value)?)
}

fn prepare_output(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output)?;
    write(&cfg.output, "resolved_config.toml", &cfg.to_toml()?)?;
    Ok(cfg.output.clone())
}

/// Panel plus VAR setup of a pipeline run.
struct Input {
    panel: SeriesPanel,
    p: usize,
    intercept: bool,
}

fn load_input(cfg: &RunConfig) -> Result<Input> {
    match (&cfg.data, &cfg.dgp) {
        (Some(path), _) => Ok(Input {
            panel: load_csv(path, &cfg.transforms)?,
            p: cfg.lags.unwrap_or(12),
            intercept: cfg.intercept,
        }),
        (None, Some(name)) => {
            let spec = name.parse::<DgpPreset>()?.spec(cfg.sample_sizes[0]);
            let p = cfg.lags.unwrap_or(spec.lags.len());
            Ok(Input {
                panel: simulate_svar(&spec, cfg.seed)?,
                p,
                intercept: cfg.intercept,
            })
        }
        (None, None) => Err(SvarError::Invalid("no input".into())),
    }
}

/// A-type coefficient with optional bootstrap bands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ATypeRow {
    pub estimator: String,
    pub equation: usize,
    pub normalized_on: String,
    pub variable: String,
    pub value: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

fn a_type_rows(
    estimator: &str,
    b_hat: &DMatrix<f64>,
    draws: &[DMatrix<f64>],
    equations: &[(usize, usize)],
    names: &[String],
    level: f64,
) -> Result<Vec<ATypeRow>> {
    if equations.is_empty() {
        return Ok(Vec::new());
    }
    let zero_based: Vec<(usize, usize)> = equations
        .iter()
        .map(|&(r, c)| {
            if r == 0 || c == 0 {
                Err(SvarError::Invalid("A-type equations are one-based".into()))
            } else {
                Ok((r - 1, c - 1))
            }
        })
        .collect::<Result<_>>()?;
    let point = to_a_type_report(b_hat, &zero_based)?;
    let per_draw: Vec<_> = draws
        .iter()
        .filter_map(|b| to_a_type_report(b, &zero_based).ok())
        .collect();
    let alpha = 1.0 - level;
    let mut rows = Vec::new();
    for (e, eq) in point.iter().enumerate() {
        for (k, &(var, value)) in eq.coefficients.iter().enumerate() {
            let (lower, upper) = if per_draw.is_empty() {
                (None, None)
            } else {
                let mut v: Vec<f64> = per_draw.iter().map(|d| d[e].coefficients[k].1).collect();
                v.sort_by(f64::total_cmp);
                (Some(quantile(&v, alpha / 2.0)), Some(quantile(&v, 1.0 - alpha / 2.0)))
            };
            rows.push(ATypeRow {
                estimator: estimator.into(),
                equation: eq.row + 1,
                normalized_on: names[eq.normalized_on].clone(),
                variable: names[var].clone(),
                value,
                lower,
                upper,
            });
        }
    }
    Ok(rows)
}

fn a_type_csv(rows: &[ATypeRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("estimator,equation,normalized_on,variable,value,lower,upper\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.estimator,
            r.equation,
            r.normalized_on,
            r.variable,
            r.value,
            opt(r.lower),
            opt(r.upper)
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedEstimate {
    pub name: String,
    pub b_hat: DMatrix<f64>,
    pub shocks: DMatrix<f64>,
}

/// Everything `report` needs to re-render the tidy CSVs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateState {
    pub names: Vec<String>,
    /// Time stamps of the effective sample.
    pub times: Vec<String>,
    pub reduced_form: ReducedForm,
    /// The `p` presample rows.
    pub initial: DMatrix<f64>,
    pub estimates: Vec<NamedEstimate>,
    /// Position of the headline estimator in `estimates`.
    pub headline: usize,
    pub horizon: usize,
    pub bands: Option<BootstrapBands>,
    pub fevd: FevdTable,
    pub a_type: Vec<ATypeRow>,
}

pub const STATE_FILE: &str = "state.json";

/// Summary of an `estimate` run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub headline: String,
    pub sample_size: usize,
    pub lags: usize,
    pub restrictions: Option<RestrictionSet>,
    pub kept: Option<Vec<(usize, usize)>>,
    pub dropped: Option<Vec<(usize, usize)>>,
    pub selected_lambda: Option<f64>,
    pub cv_fallback: Option<bool>,
    pub converged: bool,
    pub bootstrap_redraws: Option<usize>,
    pub b_hat: DMatrix<f64>,
}

struct Fits {
    recursive: EstimationResult,
    csue: EstimationResult,
    headline: EstimationResult,
    headline_name: String,
    restrictions: Option<RestrictionSet>,
    weights: Option<AdaptiveWeights>,
    cv: Option<CvReport>,
    kept: Option<RestrictionSet>,
    dropped: Option<Vec<(usize, usize)>>,
}

fn fit_all(cfg: &RunConfig, rf: &ReducedForm) -> Result<Fits> {
    let n = rf.n;
    let residuals = &rf.residuals;
    let recursive = estimate_recursive(residuals)?;
    let anchor = LabelingAnchor::new(recursive.b_hat.clone())?;
    let ms = enumerate_moments(n)?;
    let opts = EstimatorOptions::default();
    let csue = estimate_csue(residuals, &ms, &anchor, &opts)?;
    let rs = cfg.single_restriction_set(n)?;
    let sample = ResidualSample::from_matrix(residuals);
    let cv = cfg.cv_options()?;
    match rs {
        Some(rs) if !cfg.ridge_disabled() => {
            if let Some(th) = cfg.threshold {
                let sel = selection_pipeline(&sample, &ms, &anchor, &rs, th, Some(&csue), &cv, &opts)?;
                let (headline, weights, report) = match &sel.fit {
                    Some(f) => (f.ridge.clone(), Some(f.weights.clone()), Some(f.cv.clone())),
                    None => (csue.clone(), Some(sel.initial.weights.clone()), Some(sel.initial.cv.clone())),
                };
                Ok(Fits {
                    recursive,
                    headline_name: format!("RCSUE({}, selected)", rs.description),
                    csue,
                    headline,
                    restrictions: Some(rs),
                    weights,
                    cv: report,
                    kept: Some(sel.kept),
                    dropped: Some(sel.dropped),
                })
            } else {
                let fit = ridge_pipeline(&sample, &ms, &anchor, &rs, Some(&csue), &cv, &opts)?;
                Ok(Fits {
                    recursive,
                    headline_name: format!("RCSUE({})", rs.description),
                    csue,
                    headline: fit.ridge,
                    restrictions: Some(rs),
                    weights: Some(fit.weights),
                    cv: Some(fit.cv),
                    kept: None,
                    dropped: None,
                })
            }
        }
        _ => Ok(Fits {
            recursive,
            headline: csue.clone(),
            csue,
            headline_name: "CSUE".into(),
            restrictions: None,
            weights: None,
            cv: None,
            kept: None,
            dropped: None,
        }),
    }
}

fn headline_recipe(cfg: &RunConfig, fits: &Fits) -> Result<EstimatorRecipe> {
    let rs = match (&fits.kept, &fits.restrictions) {
        (Some(k), _) if k.is_empty() => return Ok(EstimatorRecipe::Csue),
        (Some(k), _) => k.clone(),
        (None, Some(r)) => r.clone(),
        (None, None) => return Ok(EstimatorRecipe::Csue),
    };
    Ok(EstimatorRecipe::Ridge {
        restrictions: rs,
        cv: cfg.cv_options()?,
        fixed_lambda: if cfg.bootstrap_fix_lambda {
            fits.headline.lambda
        } else {
            None
        },
    })
}

fn bootstrap_options(cfg: &RunConfig) -> BootstrapOptions {
    BootstrapOptions {
        draws: cfg.draws,
        level: cfg.level,
        horizon: cfg.horizon,
        seed: cfg.seed,
        ..BootstrapOptions::default()
    }
}

fn diagnostics_csv(estimates: &[(&str, &DMatrix<f64>)]) -> Result<String> {
    let mut out = String::from("estimator,shock,skewness,kurtosis,jarque_bera,p_value\n");
    for (name, shocks) in estimates {
        let d = shock_diagnostics(shocks)?;
        for j in 0..d.skewness.len() {
            out.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                j + 1,
                d.skewness[j],
                d.kurtosis[j],
                d.jarque_bera[j],
                d.p_value[j]
            ));
        }
    }
    Ok(out)
}

fn b_hat_csv(estimates: &[NamedEstimate], bands: Option<(&str, &BootstrapBands)>) -> String {
    let mut out = String::from("estimator,row,column,value,lower,upper\n");
    for e in estimates {
        let band = bands.filter(|(name, _)| *name == e.name).map(|(_, b)| b);
        for i in 0..e.b_hat.nrows() {
            for j in 0..e.b_hat.ncols() {
                let (lo, hi) = match band {
                    Some(b) => (b.lower[0][(i, j)].to_string(), b.upper[0][(i, j)].to_string()),
                    None => (String::new(), String::new()),
                };
                out.push_str(&format!("{},{},{},{},{lo},{hi}\n", e.name, i + 1, j + 1, e.b_hat[(i, j)]));
            }
        }
    }
    out
}

fn cv_losses_csv(cv: &CvReport) -> String {
    let mut out = String::from("repetition,lambda,loss\n");
    for r in 0..cv.losses.nrows() {
        if let Some(z) = &cv.zero_losses {
            out.push_str(&format!("{},0,{}\n", r + 1, z[r]));
        }
        for (k, l) in cv.grid.values().iter().enumerate() {
            out.push_str(&format!("{},{l},{}\n", r + 1, cv.losses[(r, k)]));
        }
    }
    out
}

fn weights_csv(aw: &AdaptiveWeights) -> String {
    let mut out = String::from("row,column,weight\n");
    for w in &aw.weights {
        out.push_str(&format!("{},{},{}\n", w.pair.0 + 1, w.pair.1 + 1, w.weight));
    }
    out
}

/// `estimate`: the full pipeline with every artifact written to the output directory.
pub fn cmd_estimate(cfg: &RunConfig) -> Result<EstimateSummary> {
    if cfg.fevd_horizon > cfg.horizon + 1 {
        return Err(SvarError::Invalid(format!(
            "fevd_horizon {} exceeds horizon + 1 = {}",
            cfg.fevd_horizon,
            cfg.horizon + 1
        )));
    }
    let dir = prepare_output(cfg)?;
    let input = load_input(cfg)?;
    let rf = fit_var(&input.panel, input.p, input.intercept)?;
    let fits = fit_all(cfg, &rf)?;
    let names = input.panel.variable_names().to_vec();

    let bands = if cfg.draws > 0 {
        let recipe = headline_recipe(cfg, &fits)?;
        Some(bootstrap_bands(&input.panel, input.p, input.intercept, &recipe, &fits.headline, &bootstrap_options(cfg))?)
    } else {
        None
    };
    let estimates = vec![
        NamedEstimate {
            name: "recursive".into(),
            b_hat: fits.recursive.b_hat.clone(),
            shocks: fits.recursive.shocks.clone(),
        },
        NamedEstimate {
            name: "CSUE".into(),
            b_hat: fits.csue.b_hat.clone(),
            shocks: fits.csue.shocks.clone(),
        },
        NamedEstimate {
            name: fits.headline_name.clone(),
            b_hat: fits.headline.b_hat.clone(),
            shocks: fits.headline.shocks.clone(),
        },
    ];
    let headline_irf = impulse_responses(&rf, &fits.headline.b_hat, cfg.horizon)?;
    let draws_irf = bands.as_ref().map(|b| b.irf_draws.as_slice()).unwrap_or(&[]);
    let fevd = fevd_table(&headline_irf, draws_irf, cfg.fevd_horizon, cfg.level)?;
    let draws_b = bands.as_ref().map(|b| b.b_draws.as_slice()).unwrap_or(&[]);
    let mut a_type = a_type_rows("recursive", &fits.recursive.b_hat, &[], &cfg.a_type_equations, &names, cfg.level)?;
    a_type.extend(a_type_rows(
        &fits.headline_name,
        &fits.headline.b_hat,
        draws_b,
        &cfg.a_type_equations,
        &names,
        cfg.level,
    )?);

    write(&dir, "b_hat.csv", &b_hat_csv(&estimates, bands.as_ref().map(|b| (fits.headline_name.as_str(), b))))?;
    write(
        &dir,
        "diagnostics.csv",
        &diagnostics_csv(&[
            ("reduced_form", &rf.residuals),
            ("recursive", &fits.recursive.shocks),
            ("CSUE", &fits.csue.shocks),
            (&fits.headline_name, &fits.headline.shocks),
        ])?,
    )?;
    if let Some(cv) = &fits.cv {
        write(&dir, "cv_curves.csv", &cv.curves_csv())?;
        write(&dir, "cv_losses.csv", &cv_losses_csv(cv))?;
    }
    if let Some(aw) = &fits.weights {
        write(&dir, "adaptive_weights.csv", &weights_csv(aw))?;
    }
    let times = input.panel.time_index()[input.p..].to_vec();
    let state = EstimateState {
        names,
        times,
        initial: input.panel.observations().rows(0, input.p).into_owned(),
        reduced_form: rf,
        estimates,
        headline: 2,
        horizon: cfg.horizon,
        bands: bands.clone(),
        fevd,
        a_type,
    };
    write_json(&dir, STATE_FILE, &state)?;
    render_estimate(&dir, &state)?;

    let summary = EstimateSummary {
        headline: fits.headline_name.clone(),
        sample_size: state.reduced_form.residuals.nrows(),
        lags: input.p,
        restrictions: fits.restrictions.clone(),
        kept: fits.kept.as_ref().map(|k| k.pairs().to_vec()),
        dropped: fits.dropped.clone(),
        selected_lambda: fits.headline.lambda,
        cv_fallback: fits.cv.as_ref().map(|c| c.fallback),
        converged: fits.headline.converged && fits.csue.converged,
        bootstrap_redraws: bands.as_ref().map(|b| b.redraws),
        b_hat: fits.headline.b_hat.clone(),
    };
    write_json(&dir, "summary.json", &summary)?;
    Ok(summary)
}

/// IRF, FEVD, historical decomposition and A-type tables of the headline estimator.
fn render_estimate(dir: &Path, state: &EstimateState) -> Result<()> {
    let head = &state.estimates[state.headline];
    let irf = impulse_responses(&state.reduced_form, &head.b_hat, state.horizon)?;
    write(dir, "irf.csv", &irf_csv(&irf, state.bands.as_ref(), &state.names))?;
    write(dir, "fevd.csv", &fevd_csv(&state.fevd, &state.names))?;
    let hd = historical_decomposition(&state.reduced_form, &head.b_hat, &head.shocks, &state.initial)?;
    write(dir, "historical.csv", &historical_csv(&hd, &state.names, &state.times))?;
    write(dir, "a_type.csv", &a_type_csv(&state.a_type))?;
    Ok(())
}

/// `cv`: cross-validation curves for the configured restriction set.
pub fn cmd_cv(cfg: &RunConfig) -> Result<CvReport> {
    let dir = prepare_output(cfg)?;
    let input = load_input(cfg)?;
    let rf = fit_var(&input.panel, input.p, input.intercept)?;
    let rs = cfg
        .single_restriction_set(rf.n)?
        .ok_or_else(|| SvarError::Invalid("cross-validation needs restrictions".into()))?;
    let recursive = estimate_recursive(&rf.residuals)?;
    let anchor = LabelingAnchor::new(recursive.b_hat)?;
    let ms = enumerate_moments(rf.n)?;
    let opts = EstimatorOptions::default();
    let sample = ResidualSample::from_matrix(&rf.residuals);
    let csue = estimate_csue(&rf.residuals, &ms, &anchor, &opts)?;
    let aw = compute_adaptive_weights(&csue, &rs)?;
    let report = cv_path(&sample, &ms, &anchor, &rs, &aw, &csue, &cfg.cv_options()?, &opts)?;
    write(&dir, "cv_curves.csv", &report.curves_csv())?;
    write(&dir, "cv_losses.csv", &cv_losses_csv(&report))?;
    write(&dir, "adaptive_weights.csv", &weights_csv(&aw))?;
    write_json(&dir, "cv.json", &report)?;
    Ok(report)
}

/// `bootstrap`: bands for the recursive, CSUE and headline estimators.
pub fn cmd_bootstrap(cfg: &RunConfig) -> Result<Vec<(String, BootstrapBands)>> {
    if cfg.draws < 2 {
        return Err(SvarError::Invalid("bootstrap needs at least two draws".into()));
    }
    let dir = prepare_output(cfg)?;
    let input = load_input(cfg)?;
    let rf = fit_var(&input.panel, input.p, input.intercept)?;
    let fits = fit_all(cfg, &rf)?;
    let opts = bootstrap_options(cfg);
    let mut jobs = vec![
        ("recursive".to_string(), EstimatorRecipe::Recursive, &fits.recursive),
        ("CSUE".to_string(), EstimatorRecipe::Csue, &fits.csue),
    ];
    if fits.headline_name != "CSUE" {
        jobs.push((fits.headline_name.clone(), headline_recipe(cfg, &fits)?, &fits.headline));
    }
    let names = input.panel.variable_names();
    let mut irf_out = String::from("estimator,variable,shock,horizon,value,lower,upper\n");
    let mut results = Vec::new();
    for (name, recipe, point) in jobs {
        let bands = bootstrap_bands(&input.panel, input.p, input.intercept, &recipe, point, &opts)?;
        let irf = impulse_responses(&rf, &point.b_hat, cfg.horizon)?;
        for line in irf_csv(&irf, Some(&bands), names).lines().skip(1) {
            irf_out.push_str(&format!("{name},{line}\n"));
        }
        results.push((name, bands));
    }
    write(&dir, "irf_bands.csv", &irf_out)?;
    write_json(&dir, "bootstrap.json", &results)?;
    Ok(results)
}

fn recipes_for(cfg: &RunConfig) -> Result<Vec<Recipe>> {
    let mut recipes = vec![Recipe::csue()];
    for rs in cfg.restriction_sets(4)? {
        recipes.push(match cfg.threshold {
            Some(th) => Recipe::ridge_with_selection(rs, th),
            None => Recipe::ridge(rs),
        });
    }
    Ok(recipes)
}

/// `simulate`: one experiment per sample size; tables and λ histograms per size.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Vec<ExperimentReport>> {
    let preset: DgpPreset = cfg
        .dgp
        .as_deref()
        .ok_or_else(|| SvarError::Invalid("simulate needs a DGP preset".into()))?
        .parse()?;
    let dir = prepare_output(cfg)?;
    let recipes = recipes_for(cfg)?;
    let mut table = String::new();
    let mut hist = String::new();
    let mut reports = Vec::new();
    for &t in &cfg.sample_sizes {
        let exp = ExperimentConfig {
            dgp: preset.spec(t),
            recipes: recipes.clone(),
            replications: cfg.replications,
            seed: cfg.seed,
            cv: cfg.cv_options()?,
            estimator: EstimatorOptions::default(),
            bootstrap: (cfg.draws > 0).then(|| ExperimentBootstrap {
                draws: cfg.draws,
                level: cfg.level,
                fix_lambda: cfg.bootstrap_fix_lambda,
            }),
        };
        let report = run_experiment(&exp)?;
        let csv = report.to_csv();
        let h = report.lambda_histogram_csv();
        if table.is_empty() {
            table.push_str(csv.lines().next().unwrap_or_default());
            table.push('\n');
            hist.push_str("T,");
            hist.push_str(h.lines().next().unwrap_or_default());
            hist.push('\n');
        }
        for line in csv.lines().skip(1) {
            table.push_str(line);
            table.push('\n');
        }
        for line in h.lines().skip(1) {
            hist.push_str(&format!("{t},{line}\n"));
        }
        write_json(&dir, &format!("experiment_T{t}.json"), &report)?;
        reports.push(report);
    }
    write(&dir, "table.csv", &table)?;
    write(&dir, "lambda_histogram.csv", &hist)?;
    Ok(reports)
}

/// `report`: re-render tidy CSVs from the state saved by `estimate`.
pub fn cmd_report(dir: &Path) -> Result<Vec<String>> {
    let state_path = dir.join(STATE_FILE);
    if !state_path.exists() {
        let mut missing = vec![STATE_FILE.to_string()];
        if !dir.join("resolved_config.toml").exists() {
            missing.push("resolved_config.toml".into());
        }
        return Err(SvarError::Invalid(format!(
            "{} is missing: {} (run `ridgesvar estimate` first)",
            dir.display(),
            missing.join(", ")
        )));
    }
    let state: EstimateState = serde_json::from_str(&fs::read_to_string(&state_path)?)?;
    render_estimate(dir, &state)?;
    Ok(["irf.csv", "fevd.csv", "historical.csv", "a_type.csv"].iter().map(|s| s.to_string()).collect())
}

#[derive(Debug, Clone, Args)]
pub struct IdentArgs {
    /// Shock distributions, comma separated (`mixture` or `gaussian`); 2 or 3 entries.
    #[arg(long, value_delimiter = ',', default_value = "mixture,mixture")]
    pub shocks: Vec<String>,
    /// Row-major mixing matrix; defaults to ones on the diagonal and 0.5 below.
    #[arg(long, value_delimiter = ',')]
    pub b0: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1_000_000)]
    pub t_pop: usize,
    #[arg(long, default_value_t = 180)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short = 'o')]
    pub out: Option<PathBuf>,
}

/// `check-ident`: rotation scan and verdict.
pub fn cmd_check_ident(args: &IdentArgs) -> Result<IdentificationReport> {
    let n = args.shocks.len();
    let distributions = args
        .shocks
        .iter()
        .map(|s| match s.to_ascii_lowercase().as_str() {
            "mixture" => Ok(ShockDistribution::skewed_mixture()),
            "gaussian" | "normal" => Ok(ShockDistribution::Gaussian),
            other => Err(SvarError::Invalid(format!("unknown shock distribution `{other}`"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let spec = ShockSpec {
        distributions,
        common_volatility: None,
        normalize: true,
    };
    let b0 = match &args.b0 {
        Some(v) if v.len() == n * n => DMatrix::from_row_slice(n, n, v),
        Some(v) => {
            return Err(SvarError::Invalid(format!("b0 needs {} entries, got {}", n * n, v.len())));
        }
        None => DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Greater => 0.5,
            std::cmp::Ordering::Less => 0.0,
        }),
    };
    let report = check_identification(&b0, &spec, args.resolution, args.t_pop, args.seed)?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_json(dir, "identification.json", &report)?;
    }
    Ok(report)
}

fn init_threads(threads: Option<usize>) {
    if let Some(k) = threads.filter(|&k| k > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
}

/// 0 success, 1 invalid input, 2 numerical failure.
pub fn exit_code(err: &SvarError) -> i32 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}

/// Run a parsed command, printing a one-line summary to stdout.
pub fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads);
    match cli.command {
        Command::Estimate(a) => {
            let cfg = RunConfig::resolve(&a)?;
            let s = cmd_estimate(&cfg)?;
            println!(
                "{}: λ = {}, T = {}, results in {}",
                s.headline,
                s.selected_lambda.map(|l| format!("{l:.4e}")).unwrap_or_else(|| "-".into()),
                s.sample_size,
                cfg.output.display()
            );
        }
        Command::Simulate(a) => {
            let cfg = RunConfig::resolve(&a)?;
            let reports = cmd_simulate(&cfg)?;
            for r in &reports {
                let fails: usize = r.recipes.iter().map(|x| x.failures).sum();
                println!("T = {}: {} replications, {} recipe failures", r.t, r.replications, fails);
            }
            println!("results in {}", cfg.output.display());
        }
        Command::Cv(a) => {
            let cfg = RunConfig::resolve(&a)?;
            let r = cmd_cv(&cfg)?;
            println!("selected λ = {:.4e} (index {}), results in {}", r.selected_lambda, r.selected_index, cfg.output.display());
        }
        Command::Bootstrap(a) => {
            let cfg = RunConfig::resolve(&a)?;
            let r = cmd_bootstrap(&cfg)?;
            for (name, b) in &r {
                println!("{name}: {} draws, {} redraws", b.draws, b.redraws);
            }
            println!("results in {}", cfg.output.display());
        }
        Command::Report { dir } => {
            let files = cmd_report(&dir)?;
            println!("wrote {}", files.join(", "));
        }
        Command::CheckIdent(a) => {
            let r = cmd_check_ident(&a)?;
            println!("verdict: {:?}, {} minima, loss range [{:.3e}, {:.3e}]", r.verdict, r.minima.len(), r.loss_range.0, r.loss_range.1);
        }
    }
    Ok(())
}
