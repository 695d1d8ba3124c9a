//! Benchmark harness: synthetic regression rounds with missing-at-random
//! cells, every method run under its full tuning protocol on the same fold
//! completions, and test-set metrics aggregated over rounds.
//!
//! One round generates n subjects with q informative covariates (pairwise
//! correlation rho, coefficients redrawn uniformly per round), injects MAR
//! missingness into the response and every covariate except the first two,
//! splits 80/20, runs each requested method on the training part, and
//! scores the held-out part through training-fitted imputation models.
//! Rounds are independent; all randomness is keyed by (seed, purpose,
//! round), so the study is reproducible at any thread count.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::boosting::{run_miboost, BoostFit, Offset, SquaredError};
use crate::comparators::{
    ea_boost, tune_stacked_prepared, EaBoostFit, PenalizedFit, StackedConfig, StackedMethod,
};
use crate::crossval::{fold_curve, prepare_protocol, CvCurve};
use crate::data::{
    center_apply, split_train_test, CenteringInfo, CompletedDataset, Matrix, MissingDataset,
};
use crate::error::{Error, Result};
use crate::imputation::{mice_apply, ImputationModel, MiceConfig};
use crate::rng;

/// How test-set error treats the M per-imputation predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestErrorMode {
    /// Average the M predictions per row, then square the error.
    AveragePredictions,
    /// Square the error per imputation, then average the M errors.
    AverageMses,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    /// Informative covariates, always the first q columns.
    pub q: usize,
    /// Pairwise correlation within the informative block.
    pub rho: f64,
    pub outcome_intercept: f64,
    pub noise_sd: f64,
    /// Informative coefficients are redrawn uniformly from this range each
    /// round.
    pub beta_range: (f64, f64),
    /// Logistic slopes of the missingness model on the two always-observed
    /// covariates.
    pub mar_slopes: (f64, f64),
    pub target_missing: f64,
    /// Imputations per fold and for the final model.
    pub m: usize,
    pub k: usize,
    pub rounds: usize,
    pub train_fraction: f64,
    pub nu: f64,
    pub t_stop_max: usize,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub n_alpha: usize,
    pub cd_tol: f64,
    pub cd_max_iter: usize,
    pub mice: MiceConfig,
    pub test_error_mode: TestErrorMode,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 500,
            p: 55,
            q: 5,
            rho: 0.25,
            outcome_intercept: 5.0,
            noise_sd: 4.0,
            beta_range: (1.0, 3.0),
            mar_slopes: (0.75, -0.5),
            target_missing: 0.30,
            m: 10,
            k: 5,
            rounds: 100,
            train_fraction: 0.8,
            nu: 0.1,
            t_stop_max: 1000,
            n_lambda: 200,
            lambda_min_ratio: 1e-4,
            n_alpha: 41,
            cd_tol: 1e-7,
            cd_max_iter: 1000,
            mice: MiceConfig::default(),
            test_error_mode: TestErrorMode::AveragePredictions,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q < 1 || self.q >= self.p {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= q < p, got q={} p={}",
                self.q, self.p
            )));
        }
        if self.p < 3 {
            return Err(Error::InvalidArgument(
                "the missingness model needs two always-observed covariates plus at least one maskable one".into(),
            ));
        }
        let rho_floor = -1.0 / (self.q.max(2) as f64 - 1.0);
        if !(self.rho > rho_floor && self.rho < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "correlation must lie in ({rho_floor:.4}, 1), got {}",
                self.rho
            )));
        }
        if !(self.beta_range.0 <= self.beta_range.1) {
            return Err(Error::InvalidArgument("coefficient range is reversed".into()));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidArgument("noise scale must be finite and >= 0".into()));
        }
        if !(self.target_missing > 0.0 && self.target_missing < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target missingness must lie in (0, 1), got {}",
                self.target_missing
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidArgument("train fraction must lie in (0, 1)".into()));
        }
        if self.rounds < 1 {
            return Err(Error::InvalidArgument("need at least one round".into()));
        }
        // protocol knobs reuse the validation of their home configs
        let stacked = StackedConfig {
            m: self.m,
            k: self.k,
            n_lambda: self.n_lambda,
            lambda_min_ratio: self.lambda_min_ratio,
            n_alpha: self.n_alpha,
            tol: self.cd_tol,
            max_iter: self.cd_max_iter,
            mice: self.mice.clone(),
            seed: self.seed,
        };
        stacked.validate()?;
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::InvalidArgument(format!("step length must lie in (0, 1], got {}", self.nu)));
        }
        if self.t_stop_max < 1 {
            return Err(Error::InvalidArgument("need at least one boosting iteration".into()));
        }
        Ok(())
    }

    fn stacked_config(&self, seed: u64) -> StackedConfig {
        StackedConfig {
            m: self.m,
            k: self.k,
            n_lambda: self.n_lambda,
            lambda_min_ratio: self.lambda_min_ratio,
            n_alpha: self.n_alpha,
            tol: self.cd_tol,
            max_iter: self.cd_max_iter,
            mice: self.mice.clone(),
            seed,
        }
    }
}

/// The generating model behind one round.
#[derive(Debug, Clone, Serialize)]
pub struct TrueModel {
    pub intercept: f64,
    pub beta: Vec<f64>,
    /// Indices with nonzero coefficients, ascending.
    pub informative: Vec<usize>,
    pub noise_sd: f64,
}

/// Draw one complete round: informative block with the requested pairwise
/// correlation (via the closed-form symmetric square root of an
/// equicorrelation matrix), independent standard-normal noise covariates,
/// and a linear response.
pub fn generate_complete(cfg: &SimConfig, round: u64) -> Result<(CompletedDataset, TrueModel)> {
    cfg.validate()?;
    let (n, p, q) = (cfg.n, cfg.p, cfg.q);
    let mut r = rng::stream(cfg.seed, "sim-generate", &[round]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut beta = vec![0.0; p];
    for b in beta.iter_mut().take(q) {
        *b = if cfg.beta_range.0 == cfg.beta_range.1 {
            cfg.beta_range.0
        } else {
            r.random_range(cfg.beta_range.0..cfg.beta_range.1)
        };
    }
    // sqrt(R) = a I + b J for equicorrelation R: a = sqrt(1 - rho),
    // b = (sqrt(1 + (q-1) rho) - a) / q
    let a = (1.0 - cfg.rho).sqrt();
    let b = ((1.0 + (q as f64 - 1.0) * cfg.rho).sqrt() - a) / q as f64;
    let mut x = Matrix::zeros(n, p);
    let mut y = Vec::with_capacity(n);
    let mut z = vec![0.0; q];
    for i in 0..n {
        for zj in z.iter_mut() {
            *zj = normal.sample(&mut r);
        }
        let zsum: f64 = z.iter().sum();
        for j in 0..q {
            x.set(i, j, a * z[j] + b * zsum);
        }
        for j in q..p {
            x.set(i, j, normal.sample(&mut r));
        }
        let mut yi = cfg.outcome_intercept + cfg.noise_sd * normal.sample(&mut r);
        for (j, &bj) in beta.iter().enumerate().take(q) {
            yi += bj * x.get(i, j);
        }
        y.push(yi);
    }
    let truth = TrueModel {
        intercept: cfg.outcome_intercept,
        beta,
        informative: (0..q).collect(),
        noise_sd: cfg.noise_sd,
    };
    Ok((CompletedDataset::new(y, x)?, truth))
}

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Intercept of the missingness model, solved by bisection so the sample
/// mean of logistic(a + g1 x1 + g2 x2) hits `target` within 1e-4.
pub fn mar_intercept(complete: &CompletedDataset, slopes: (f64, f64), target: f64) -> Result<f64> {
    if complete.p() < 2 {
        return Err(Error::InvalidArgument(
            "the missingness model needs the first two covariates".into(),
        ));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target missingness must lie in (0, 1), got {target}"
        )));
    }
    let n = complete.n();
    let mean_prob = |alpha: f64| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            total += logistic(alpha + slopes.0 * complete.x.get(i, 0) + slopes.1 * complete.x.get(i, 1));
        }
        total / n as f64
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    if mean_prob(lo) > target || mean_prob(hi) < target {
        return Err(Error::Numeric(
            "missingness intercept does not bracket the target; slopes overwhelm the logistic range".into(),
        ));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let alpha = 0.5 * (lo + hi);
    debug_assert!((mean_prob(alpha) - target).abs() < 1e-4);
    Ok(alpha)
}

/// Inject MAR missingness: the first two covariates stay complete and
/// drive a per-row logistic probability; the response and every other
/// covariate get independent cell-wise missingness at that probability.
pub fn induce_mar(
    complete: &CompletedDataset,
    slopes: (f64, f64),
    target: f64,
    seed: u64,
) -> Result<MissingDataset> {
    let alpha = mar_intercept(complete, slopes, target)?;
    let (n, p) = (complete.n(), complete.p());
    let mut r = rng::stream(seed, "mar-mask", &[]);
    let mut mask_y = vec![true; n];
    let mut mask_x = vec![true; n * p];
    for i in 0..n {
        let prob = logistic(alpha + slopes.0 * complete.x.get(i, 0) + slopes.1 * complete.x.get(i, 1));
        if r.random_range(0.0..1.0) < prob {
            mask_y[i] = false;
        }
        for j in 2..p {
            if r.random_range(0.0..1.0) < prob {
                mask_x[i * p + j] = false;
            }
        }
    }
    let names = (0..p).map(|j| format!("X{}", j + 1)).collect();
    MissingDataset::new(complete.y.clone(), complete.x.clone(), mask_y, mask_x, names, "y".into())
}

/// One complete benchmark draw: generate, then mask.
pub fn generate_round(cfg: &SimConfig, round: u64) -> Result<(MissingDataset, TrueModel)> {
    let (complete, truth) = generate_complete(cfg, round)?;
    let d = induce_mar(
        &complete,
        cfg.mar_slopes,
        cfg.target_missing,
        rng::derive_seed(cfg.seed, "sim-mar", &[round]),
    )?;
    Ok((d, truth))
}

/// Anything that scores a centered covariate row with one shared
/// coefficient vector.
pub trait AveragedModel {
    fn predict_centered_row(&self, x: &[f64]) -> f64;
}

impl AveragedModel for BoostFit {
    fn predict_centered_row(&self, x: &[f64]) -> f64 {
        let mut eta = self.mean_offset() + self.averaged[0];
        for (j, &xj) in x.iter().enumerate() {
            eta += self.averaged[j + 1] * xj;
        }
        eta
    }
}

impl AveragedModel for EaBoostFit {
    fn predict_centered_row(&self, x: &[f64]) -> f64 {
        self.fit.predict_centered_row(x)
    }
}

impl AveragedModel for PenalizedFit {
    fn predict_centered_row(&self, x: &[f64]) -> f64 {
        let mut eta = self.intercept;
        for (j, &xj) in x.iter().enumerate() {
            eta += self.coefficients[j] * xj;
        }
        eta
    }
}

/// Plain linear scorer, handy for oracle and null baselines.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl AveragedModel for LinearModel {
    fn predict_centered_row(&self, x: &[f64]) -> f64 {
        let mut eta = self.intercept;
        for (j, &xj) in x.iter().enumerate() {
            eta += self.coefficients[j] * xj;
        }
        eta
    }
}

/// Held-out data pushed through training-fitted imputation models once, so
/// several fitted models can be scored without re-imputing.
#[derive(Debug, Clone)]
pub struct PreparedTest {
    /// Completed covariates, centered with the training means.
    pub sets: Vec<CompletedDataset>,
    /// Rows whose response was genuinely observed; only these score.
    pub eval_rows: Vec<usize>,
    observed_y: Vec<f64>,
    y_variance: f64,
}

pub fn prepare_test(
    test: &MissingDataset,
    models: &[ImputationModel],
    centerings: &[CenteringInfo],
    seed: u64,
) -> Result<PreparedTest> {
    if models.len() != centerings.len() || models.is_empty() {
        return Err(Error::Dimension(format!(
            "{} imputation models with {} centerings",
            models.len(),
            centerings.len()
        )));
    }
    let eval_rows: Vec<usize> = (0..test.n()).filter(|&i| test.y_observed(i)).collect();
    if eval_rows.len() < 2 {
        return Err(Error::DegenerateSplit(format!(
            "test error needs at least 2 observed responses, found {}",
            eval_rows.len()
        )));
    }
    let observed_y: Vec<f64> = eval_rows.iter().map(|&i| test.y(i)).collect();
    let mean = observed_y.iter().sum::<f64>() / observed_y.len() as f64;
    let y_variance = observed_y.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        / (observed_y.len() - 1) as f64;
    let mut sets = Vec::with_capacity(models.len());
    for (model, c) in models.iter().zip(centerings) {
        let completed = mice_apply(model, test, seed)?;
        sets.push(center_apply(&completed, c)?);
    }
    Ok(PreparedTest {
        sets,
        eval_rows,
        observed_y,
        y_variance,
    })
}

/// (raw, variance-normalized) squared prediction error on the observed-
/// response test rows.
pub fn evaluate_prepared<M: AveragedModel + ?Sized>(
    prep: &PreparedTest,
    model: &M,
    mode: TestErrorMode,
) -> (f64, f64) {
    let m = prep.sets.len();
    let n_eval = prep.eval_rows.len();
    let raw = match mode {
        TestErrorMode::AveragePredictions => {
            let mut sse = 0.0;
            for (slot, &row) in prep.eval_rows.iter().enumerate() {
                let mut pred = 0.0;
                for s in &prep.sets {
                    pred += model.predict_centered_row(s.x.row(row));
                }
                pred /= m as f64;
                sse += (prep.observed_y[slot] - pred).powi(2);
            }
            sse / n_eval as f64
        }
        TestErrorMode::AverageMses => {
            let mut total = 0.0;
            for s in &prep.sets {
                let mut sse = 0.0;
                for (slot, &row) in prep.eval_rows.iter().enumerate() {
                    sse += (prep.observed_y[slot] - model.predict_centered_row(s.x.row(row))).powi(2);
                }
                total += sse / n_eval as f64;
            }
            total / m as f64
        }
    };
    (raw, raw / prep.y_variance)
}

/// Impute the held-out part with training-fitted models and score one
/// model. `evaluate_prepared` is cheaper when several models share the
/// imputations.
pub fn evaluate_on_test<M: AveragedModel + ?Sized>(
    model: &M,
    test: &MissingDataset,
    models: &[ImputationModel],
    centerings: &[CenteringInfo],
    seed: u64,
    mode: TestErrorMode,
) -> Result<(f64, f64)> {
    let prep = prepare_test(test, models, centerings, seed)?;
    Ok(evaluate_prepared(&prep, model, mode))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Miboost,
    Eaboost,
    Salasso,
    Saenet,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Miboost, Method::Eaboost, Method::Salasso, Method::Saenet];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Miboost => "miboost",
            Method::Eaboost => "eaboost",
            Method::Salasso => "salasso",
            Method::Saenet => "saenet",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s.trim().to_ascii_lowercase().as_str() {
            "miboost" => Ok(Method::Miboost),
            "eaboost" | "ea-boost" | "ea" => Ok(Method::Eaboost),
            "salasso" | "sa-lasso" => Ok(Method::Salasso),
            "saenet" | "sa-enet" => Ok(Method::Saenet),
            other => Err(Error::InvalidArgument(format!(
                "unknown method \"{other}\"; expected miboost, eaboost, salasso, or saenet"
            ))),
        }
    }
}

/// One method's results in one round.
#[derive(Debug, Clone, Serialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub mspe_raw: f64,
    pub mspe_normalized: f64,
    /// Boosting stopping iteration: the selected t* (mean over datasets for
    /// estimate averaging). Absent for penalized methods.
    pub t_star: Option<f64>,
    pub lambda_star: Option<f64>,
    pub alpha_star: Option<f64>,
    pub selected: Vec<usize>,
    pub n_selected: usize,
    pub n_informative_selected: usize,
    pub n_noise_selected: usize,
    pub tpp: f64,
    pub tnp: f64,
    /// Wall time of the method's own fitting work. The two stacked methods
    /// are tuned jointly, so they report the same shared duration.
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundResult {
    pub round: usize,
    pub per_method: Vec<MethodMetrics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundFailure {
    pub round: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Standard error of the mean; absent with fewer than two rounds.
    pub se: Option<f64>,
}

fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = if n >= 2 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Some((var / n as f64).sqrt())
    } else {
        None
    };
    MetricSummary { mean, se }
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub rounds: usize,
    pub mspe_raw: MetricSummary,
    pub mspe_normalized: MetricSummary,
    pub tpp: MetricSummary,
    pub tnp: MetricSummary,
    pub n_selected: MetricSummary,
    pub t_star: Option<MetricSummary>,
    pub lambda_star: Option<MetricSummary>,
    pub alpha_star: Option<MetricSummary>,
    /// Not part of the deterministic summary artifact.
    pub wall_time_ms: MetricSummary,
}

/// Completed study: per-round records in round order, per-method means,
/// and any failed rounds (kept, never silently dropped).
#[derive(Debug, Clone, Serialize)]
pub struct StudySummary {
    pub config: SimConfig,
    pub methods: Vec<Method>,
    pub rounds: Vec<RoundResult>,
    pub per_method: Vec<MethodSummary>,
    pub failures: Vec<RoundFailure>,
}

/// Run every requested method on one generated round.
pub fn run_round(cfg: &SimConfig, methods: &[Method], round: u64) -> Result<RoundResult> {
    let (full, truth) = generate_round(cfg, round)?;
    let (train, test) = split_train_test(
        &full,
        cfg.train_fraction,
        rng::derive_seed(cfg.seed, "sim-split", &[round]),
    )?;
    let protocol_seed = rng::derive_seed(cfg.seed, "sim-protocol", &[round]);
    let prep = prepare_protocol(&train, cfg.m, cfg.k, &cfg.mice, protocol_seed)?;
    let test_prep = prepare_test(
        &test,
        &prep.full_models,
        &prep.full_centerings,
        rng::derive_seed(cfg.seed, "sim-test", &[round]),
    )?;
    let loss = SquaredError;

    let mut boost_out: Option<(BoostFit, f64, f64)> = None;
    if methods.contains(&Method::Miboost) {
        let start = Instant::now();
        let mut per_fold = Vec::with_capacity(prep.fold_data.len());
        for fd in &prep.fold_data {
            let rows: Vec<usize> = (0..fd.val_y_observed.len()).collect();
            let (errors, _) = fold_curve(&fd.train, &fd.val, &rows, cfg.nu, cfg.t_stop_max, &loss)?;
            per_fold.push(errors);
        }
        let curve = CvCurve::from_folds(per_fold);
        let fit = run_miboost(&prep.full, &loss, cfg.nu, curve.t_star, Offset::Mean)?;
        boost_out = Some((fit, curve.t_star as f64, start.elapsed().as_secs_f64() * 1e3));
    }

    let mut ea_out: Option<(EaBoostFit, f64)> = None;
    if methods.contains(&Method::Eaboost) {
        let start = Instant::now();
        let fit = ea_boost(&prep.full, &loss, cfg.nu, cfg.k, cfg.t_stop_max, protocol_seed)?;
        ea_out = Some((fit, start.elapsed().as_secs_f64() * 1e3));
    }

    let stacked_wanted: Vec<StackedMethod> = methods
        .iter()
        .filter_map(|m| match m {
            Method::Salasso => Some(StackedMethod::SaLasso),
            Method::Saenet => Some(StackedMethod::SaEnet),
            _ => None,
        })
        .collect();
    let mut stacked_out = Vec::new();
    let mut stacked_ms = 0.0;
    if !stacked_wanted.is_empty() {
        let start = Instant::now();
        stacked_out = tune_stacked_prepared(&prep, &stacked_wanted, &cfg.stacked_config(protocol_seed))?;
        stacked_ms = start.elapsed().as_secs_f64() * 1e3;
    }

    let metrics_for = |method: Method| -> Result<MethodMetrics> {
        let (raw, norm, t_star, lambda_star, alpha_star, selected, wall) = match method {
            Method::Miboost => {
                let (fit, t, ms) = boost_out.as_ref().expect("requested method was fitted");
                let (raw, norm) = evaluate_prepared(&test_prep, fit, cfg.test_error_mode);
                (raw, norm, Some(*t), None, None, fit.selected_set(), *ms)
            }
            Method::Eaboost => {
                let (fit, ms) = ea_out.as_ref().expect("requested method was fitted");
                let (raw, norm) = evaluate_prepared(&test_prep, fit, cfg.test_error_mode);
                (raw, norm, Some(fit.mean_t_star()), None, None, fit.selected.clone(), *ms)
            }
            Method::Salasso | Method::Saenet => {
                let target = if method == Method::Salasso {
                    StackedMethod::SaLasso
                } else {
                    StackedMethod::SaEnet
                };
                let res = stacked_out
                    .iter()
                    .find(|r| r.method == target)
                    .expect("requested method was tuned");
                let (raw, norm) = evaluate_prepared(&test_prep, &res.fit, cfg.test_error_mode);
                (
                    raw,
                    norm,
                    None,
                    Some(res.best_lambda),
                    Some(res.best_alpha),
                    res.selected(),
                    stacked_ms,
                )
            }
        };
        let n_informative_selected = selected.iter().filter(|&&j| j < cfg.q).count();
        let n_noise_selected = selected.len() - n_informative_selected;
        let noise_total = cfg.p - cfg.q;
        Ok(MethodMetrics {
            method,
            mspe_raw: raw,
            mspe_normalized: norm,
            t_star,
            lambda_star,
            alpha_star,
            n_selected: selected.len(),
            n_informative_selected,
            n_noise_selected,
            tpp: n_informative_selected as f64 / truth.informative.len() as f64,
            tnp: (noise_total - n_noise_selected) as f64 / noise_total as f64,
            selected,
            wall_time_ms: wall,
        })
    };

    let per_method = methods.iter().map(|&m| metrics_for(m)).collect::<Result<Vec<_>>>()?;
    Ok(RoundResult {
        round: round as usize,
        per_method,
    })
}

/// Run the whole study. Rounds execute concurrently; a failed round is
/// recorded with its message and the study continues. Aggregation follows
/// round order, so the summary does not depend on scheduling.
pub fn run_study(cfg: &SimConfig, methods: &[Method]) -> Result<StudySummary> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods requested".into()));
    }
    let mut seen = Vec::new();
    for m in methods {
        if seen.contains(m) {
            return Err(Error::InvalidArgument(format!("method {m} listed twice")));
        }
        seen.push(*m);
    }
    let outcomes: Vec<std::result::Result<RoundResult, RoundFailure>> = (0..cfg.rounds)
        .into_par_iter()
        .map(|r| {
            run_round(cfg, methods, r as u64).map_err(|e| RoundFailure {
                round: r,
                message: e.to_string(),
            })
        })
        .collect();
    let mut rounds = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => rounds.push(r),
            Err(f) => failures.push(f),
        }
    }
    let per_method = methods
        .iter()
        .map(|&method| {
            let picks: Vec<&MethodMetrics> = rounds
                .iter()
                .map(|r| {
                    r.per_method
                        .iter()
                        .find(|mm| mm.method == method)
                        .expect("every completed round covers every method")
                })
                .collect();
            let col = |f: &dyn Fn(&MethodMetrics) -> f64| -> Vec<f64> { picks.iter().map(|m| f(m)).collect() };
            let opt_col = |f: &dyn Fn(&MethodMetrics) -> Option<f64>| -> Option<Vec<f64>> {
                picks.iter().map(|m| f(m)).collect()
            };
            MethodSummary {
                method,
                rounds: picks.len(),
                mspe_raw: summarize(&col(&|m| m.mspe_raw)),
                mspe_normalized: summarize(&col(&|m| m.mspe_normalized)),
                tpp: summarize(&col(&|m| m.tpp)),
                tnp: summarize(&col(&|m| m.tnp)),
                n_selected: summarize(&col(&|m| m.n_selected as f64)),
                t_star: opt_col(&|m| m.t_star).map(|v| summarize(&v)),
                lambda_star: opt_col(&|m| m.lambda_star).map(|v| summarize(&v)),
                alpha_star: opt_col(&|m| m.alpha_star).map(|v| summarize(&v)),
                wall_time_ms: summarize(&col(&|m| m.wall_time_ms)),
            }
        })
        .collect();
    Ok(StudySummary {
        config: cfg.clone(),
        methods: methods.to_vec(),
        rounds,
        per_method,
        failures,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StudySummary {
    /// One row per (round, method). Wall times make this file
    /// non-deterministic; everything else is seed-determined.
    pub fn rounds_csv(&self) -> String {
        let mut out = String::from(
            "round,method,mspe_raw,mspe_normalized,t_star,lambda_star,alpha_star,n_selected,tpp,tnp,wall_time_ms,selected\n",
        );
        for r in &self.rounds {
            for m in &r.per_method {
                let names: Vec<String> = m.selected.iter().map(|j| format!("X{}", j + 1)).collect();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    r.round + 1,
                    m.method,
                    m.mspe_raw,
                    m.mspe_normalized,
                    fmt_opt(m.t_star),
                    fmt_opt(m.lambda_star),
                    fmt_opt(m.alpha_star),
                    m.n_selected,
                    m.tpp,
                    m.tnp,
                    m.wall_time_ms,
                    names.join("|"),
                ));
            }
        }
        out
    }

    /// Per-method means and standard errors. Excludes wall time, so the
    /// bytes depend only on the config and seed.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "method,rounds,mspe_raw_mean,mspe_raw_se,mspe_normalized_mean,mspe_normalized_se,tpp_mean,tpp_se,tnp_mean,tnp_se,n_selected_mean,n_selected_se,t_star_mean,t_star_se,lambda_star_mean,lambda_star_se,alpha_star_mean,alpha_star_se\n",
        );
        for s in &self.per_method {
            let pair = |m: &MetricSummary| format!("{},{}", m.mean, fmt_opt(m.se));
            let opt_pair = |m: &Option<MetricSummary>| match m {
                Some(m) => pair(m),
                None => ",".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                s.method,
                s.rounds,
                pair(&s.mspe_raw),
                pair(&s.mspe_normalized),
                pair(&s.tpp),
                pair(&s.tnp),
                pair(&s.n_selected),
                opt_pair(&s.t_star),
                opt_pair(&s.lambda_star),
                opt_pair(&s.alpha_star),
            ));
        }
        out
    }

    /// Aligned plain-text table of the summary for terminals.
    pub fn table_text(&self) -> String {
        let mut rows: Vec<[String; 8]> = vec![[
            "method".into(),
            "rounds".into(),
            "mspe".into(),
            "mspe_norm".into(),
            "tpp".into(),
            "tnp".into(),
            "n_selected".into(),
            "t*/lambda*".into(),
        ]];
        for s in &self.per_method {
            let stop = match (&s.t_star, &s.lambda_star) {
                (Some(t), _) => format!("{:.1}", t.mean),
                (None, Some(l)) => format!("{:.4}", l.mean),
                _ => String::new(),
            };
            rows.push([
                s.method.to_string(),
                s.rounds.to_string(),
                format!("{:.3}", s.mspe_raw.mean),
                format!("{:.3}", s.mspe_normalized.mean),
                format!("{:.3}", s.tpp.mean),
                format!("{:.3}", s.tnp.mean),
                format!("{:.2}", s.n_selected.mean),
                stop,
            ]);
        }
        let mut width = [0usize; 8];
        for row in &rows {
            for (w, cell) in width.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        for row in &rows {
            let line: Vec<String> = row
                .iter()
                .zip(&width)
                .map(|(cell, w)| format!("{cell:>w$}", w = w))
                .collect();
            out.push_str(&line.join("  "));
            out.push('\n');
        }
        if !self.failures.is_empty() {
            out.push_str(&format!("failed rounds: {}\n", self.failures.len()));
        }
        out
    }

    /// Write rounds.csv, summary.csv, and a config echo (plus failures.csv
    /// when any round failed) into `dir`.
    pub fn write_results(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let write = |name: &str, content: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, content).map_err(|e| Error::io(path.display().to_string(), e))
        };
        write("rounds.csv", self.rounds_csv())?;
        write("summary.csv", self.summary_csv())?;
        #[derive(Serialize)]
        struct Echo<'a> {
            config: &'a SimConfig,
            methods: &'a [Method],
        }
        let echo = serde_json::to_string_pretty(&Echo {
            config: &self.config,
            methods: &self.methods,
        })?;
        write("config.json", echo + "\n")?;
        if !self.failures.is_empty() {
            let mut out = String::from("round,message\n");
            for f in &self.failures {
                out.push_str(&format!("{},\"{}\"\n", f.round + 1, f.message.replace('"', "\"\"")));
            }
            write("failures.csv", out)?;
        }
        Ok(())
    }
}
