//! Comparator estimators that pool multiply completed data a different way.
//!
//! The stacked penalized family concatenates the M completed training sets
//! into one tall design, downweights every row by 1/M so each subject keeps
//! total weight one, and fits an adaptive LASSO or elastic net by cyclic
//! coordinate descent. Adaptive penalty weights come from a preliminary
//! equal-weight stacked elastic net; a coefficient that preliminary fit
//! shrank to zero gets infinite weight and is excluded from the path.
//! Tuning follows the same split-before-impute fold protocol as the
//! boosting selector, so both families see identical fold completions for
//! a given seed.
//!
//! Estimate-averaging boosting is the naive pooling baseline: boost each
//! completed dataset on its own with its own stopping iteration, then
//! average the coefficient vectors.

use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeSet;
use std::path::Path;

use crate::boosting::{run_miboost, BoostFit, Loss, Offset};
use crate::crossval::{prepare_protocol, fold_curve, CvCurve, ProtocolPrep};
use crate::data::{make_folds, CenteringInfo, CompletedDataset, Matrix, MissingDataset};
use crate::error::{Error, Result};
use crate::imputation::{mice_apply, ImputationModel, MiceConfig};
use crate::rng;

/// M completed datasets concatenated dataset-major: rows 0..n are the first
/// completion, rows n..2n the second, and so on. Every row carries weight
/// 1/M, so the M copies of one subject sum to weight one.
#[derive(Debug, Clone)]
pub struct StackedDesign {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
    /// (dataset, subject) provenance of every row.
    pub origin: Vec<(usize, usize)>,
    /// Subjects in the source data. Subject ids in `origin` keep this
    /// meaning even for row subsets.
    pub n_subjects: usize,
    pub m: usize,
}

/// Concatenate completed datasets into one weighted design.
pub fn stack(sets: &[CompletedDataset]) -> Result<StackedDesign> {
    if sets.is_empty() {
        return Err(Error::EmptyInput("stacking requires at least one completed dataset".into()));
    }
    let n = sets[0].n();
    let p = sets[0].p();
    if n == 0 || p == 0 {
        return Err(Error::EmptyInput("stacking requires rows and covariates".into()));
    }
    for (i, s) in sets.iter().enumerate() {
        if s.n() != n || s.p() != p {
            return Err(Error::Dimension(format!(
                "completed dataset {} is {}x{}, expected {}x{}",
                i + 1,
                s.n(),
                s.p(),
                n,
                p
            )));
        }
    }
    let m = sets.len();
    let w = 1.0 / m as f64;
    let mut x = Matrix::zeros(m * n, p);
    let mut y = Vec::with_capacity(m * n);
    let mut origin = Vec::with_capacity(m * n);
    for (mi, s) in sets.iter().enumerate() {
        for i in 0..n {
            let r = mi * n + i;
            for j in 0..p {
                x.set(r, j, s.x.get(i, j));
            }
            y.push(s.y[i]);
            origin.push((mi, i));
        }
    }
    Ok(StackedDesign {
        x,
        y,
        weights: vec![w; m * n],
        origin,
        n_subjects: n,
        m,
    })
}

impl StackedDesign {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.n_cols()
    }

    /// Copy the given rows, keeping weights and provenance.
    pub fn subset_rows(&self, rows: &[usize]) -> StackedDesign {
        let mut x = Matrix::zeros(rows.len(), self.p());
        let mut y = Vec::with_capacity(rows.len());
        let mut weights = Vec::with_capacity(rows.len());
        let mut origin = Vec::with_capacity(rows.len());
        for (slot, &r) in rows.iter().enumerate() {
            for j in 0..self.p() {
                x.set(slot, j, self.x.get(r, j));
            }
            y.push(self.y[r]);
            weights.push(self.weights[r]);
            origin.push(self.origin[r]);
        }
        StackedDesign {
            x,
            y,
            weights,
            origin,
            n_subjects: self.n_subjects,
            m: self.m,
        }
    }
}

/// One penalized fit. `adaptive_weights[j]` is infinite when the coordinate
/// was excluded outright; its coefficient is then exactly zero.
#[derive(Debug, Clone, Serialize)]
pub struct PenalizedFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub alpha: f64,
    pub adaptive_weights: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub kkt_residual: f64,
}

impl PenalizedFit {
    /// Covariates with nonzero coefficients, ascending.
    pub fn selected(&self) -> Vec<usize> {
        self.coefficients
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0.0)
            .map(|(j, _)| j)
            .collect()
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Weighted second moments of a stacked design. Shared by every fit on the
/// same rows, so a path costs one Gram matrix plus cheap sweeps.
struct EnetSolver {
    p: usize,
    w_total: f64,
    sy: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    yy: f64,
    sx: Vec<f64>,
    g: Vec<f64>,
    gram: Vec<f64>,
}

impl EnetSolver {
    fn new(d: &StackedDesign) -> EnetSolver {
        let p = d.p();
        let mut w_total = 0.0;
        let mut sy = 0.0;
        let mut yy = 0.0;
        let mut sx = vec![0.0; p];
        let mut g = vec![0.0; p];
        let mut gram = vec![0.0; p * p];
        for i in 0..d.n_rows() {
            let w = d.weights[i];
            let yi = d.y[i];
            let row = d.x.row(i);
            w_total += w;
            sy += w * yi;
            yy += w * yi * yi;
            for j in 0..p {
                let wxj = w * row[j];
                sx[j] += wxj;
                g[j] += wxj * yi;
                let base = j * p;
                for (k, &xk) in row.iter().enumerate().skip(j) {
                    gram[base + k] += wxj * xk;
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                gram[j * p + k] = gram[k * p + j];
            }
        }
        EnetSolver {
            p,
            w_total,
            sy,
            yy,
            sx,
            g,
            gram,
        }
    }

    fn intercept_for(&self, beta: &[f64], support: &[usize]) -> f64 {
        let dot: f64 = support.iter().map(|&j| beta[j] * self.sx[j]).sum();
        (self.sy - dot) / self.w_total
    }

    /// Largest stationarity violation over the intercept and every
    /// non-excluded coordinate.
    fn kkt_residual(
        &self,
        beta0: f64,
        beta: &[f64],
        support: &[usize],
        lambda: f64,
        alpha: f64,
        weights: &[f64],
    ) -> f64 {
        let p = self.p;
        let dot_sx: f64 = support.iter().map(|&j| beta[j] * self.sx[j]).sum();
        let mut worst = (self.sy - beta0 * self.w_total - dot_sx).abs();
        for j in 0..p {
            if weights[j].is_infinite() {
                continue;
            }
            let mut cross = 0.0;
            for &k in support {
                cross += self.gram[j * p + k] * beta[k];
            }
            let grad = self.g[j] - beta0 * self.sx[j] - cross;
            let v = if beta[j] != 0.0 {
                (grad - lambda * (1.0 - alpha) * weights[j] * beta[j]
                    - lambda * alpha * weights[j] * beta[j].signum())
                .abs()
            } else {
                (grad.abs() - lambda * alpha * weights[j]).max(0.0)
            };
            if v > worst {
                worst = v;
            }
        }
        worst
    }

    /// Convergence threshold scale: the tolerance is relative to the size of
    /// the score moments, floored at one.
    fn kkt_scale(&self) -> f64 {
        let gmax = self.g.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        gmax.max(self.sy.abs()).max(1.0)
    }

    fn solve(
        &self,
        lambda: f64,
        alpha: f64,
        weights: &[f64],
        warm: Option<&[f64]>,
        tol: f64,
        max_iter: usize,
    ) -> PenalizedFit {
        let p = self.p;
        let mut beta: Vec<f64> = match warm {
            Some(w) => w.to_vec(),
            None => vec![0.0; p],
        };
        for j in 0..p {
            if weights[j].is_infinite() {
                beta[j] = 0.0;
            }
        }
        let mut support: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        let threshold = tol * self.kkt_scale();
        let mut beta0 = self.intercept_for(&beta, &support);
        let mut iterations = 0;
        let mut converged = false;
        let mut kkt = f64::INFINITY;
        while iterations < max_iter {
            iterations += 1;
            for j in 0..p {
                if weights[j].is_infinite() {
                    continue;
                }
                let gjj = self.gram[j * p + j];
                let mut cross = 0.0;
                for &k in &support {
                    cross += self.gram[j * p + k] * beta[k];
                }
                cross -= gjj * beta[j];
                let z = self.g[j] - beta0 * self.sx[j] - cross;
                let den = gjj + lambda * (1.0 - alpha) * weights[j];
                let new = if den > 0.0 {
                    soft_threshold(z, lambda * alpha * weights[j]) / den
                } else {
                    0.0
                };
                if new != beta[j] {
                    if beta[j] == 0.0 {
                        support.push(j);
                    }
                    beta[j] = new;
                }
            }
            support.retain(|&j| beta[j] != 0.0);
            beta0 = self.intercept_for(&beta, &support);
            kkt = self.kkt_residual(beta0, &beta, &support, lambda, alpha, weights);
            if kkt <= threshold {
                converged = true;
                break;
            }
        }
        PenalizedFit {
            intercept: beta0,
            coefficients: beta,
            lambda,
            alpha,
            adaptive_weights: weights.to_vec(),
            converged,
            iterations,
            kkt_residual: kkt,
        }
    }

    #[cfg(test)]
    fn objective(&self, fit: &PenalizedFit) -> f64 {
        let b0 = fit.intercept;
        let mut q = self.yy + b0 * b0 * self.w_total - 2.0 * b0 * self.sy;
        for (j, &b) in fit.coefficients.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            q += 2.0 * b0 * b * self.sx[j] - 2.0 * b * self.g[j];
            for (k, &bk) in fit.coefficients.iter().enumerate() {
                if bk != 0.0 {
                    q += b * self.gram[j * self.p + k] * bk;
                }
            }
        }
        let mut pen = 0.0;
        for (j, &b) in fit.coefficients.iter().enumerate() {
            if b != 0.0 {
                pen += fit.adaptive_weights[j]
                    * (fit.alpha * b.abs() + 0.5 * (1.0 - fit.alpha) * b * b);
            }
        }
        0.5 * q + fit.lambda * pen
    }
}

fn validate_penalty(
    design: &StackedDesign,
    lambda: f64,
    alpha: f64,
    weights: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<()> {
    if weights.len() != design.p() {
        return Err(Error::Dimension(format!(
            "{} penalty weights for {} covariates",
            weights.len(),
            design.p()
        )));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("penalty strength must be finite and >= 0, got {lambda}")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("mixing parameter must lie in [0, 1], got {alpha}")));
    }
    if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::InvalidArgument("penalty weights must be >= 0 (infinite excludes a coordinate)".into()));
    }
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::InvalidArgument("need tol > 0 and at least one sweep".into()));
    }
    Ok(())
}

/// Cyclic coordinate descent for the weighted adaptive elastic net
///
///   F(b0, b) = 1/2 sum_i w_i (y_i - b0 - x_i'b)^2
///            + lambda sum_j a_j (alpha |b_j| + (1 - alpha)/2 b_j^2)
///
/// with an unpenalized intercept. Stops when the largest stationarity
/// violation falls below tol (relative to the score scale); hitting
/// `max_iter` first is reported through `converged`, not an error.
pub fn coord_descent_enet(
    design: &StackedDesign,
    lambda: f64,
    alpha: f64,
    weights: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<PenalizedFit> {
    validate_penalty(design, lambda, alpha, weights, tol, max_iter)?;
    let solver = EnetSolver::new(design);
    Ok(solver.solve(lambda, alpha, weights, None, tol, max_iter))
}

/// Penalty weights 1/|b_j| from preliminary coefficients; exact zeros get
/// infinite weight, which excludes the coordinate from later fits.
pub fn adaptive_weights(coefficients: &[f64]) -> Vec<f64> {
    coefficients
        .iter()
        .map(|&b| if b == 0.0 { f64::INFINITY } else { 1.0 / b.abs() })
        .collect()
}

/// Smallest penalty that zeroes every coordinate at alpha = 1:
/// max_j |sum_i w_i x_ij y_i| / a_j over non-excluded j.
pub fn lambda_max(design: &StackedDesign, weights: &[f64]) -> Result<f64> {
    if weights.len() != design.p() {
        return Err(Error::Dimension(format!(
            "{} penalty weights for {} covariates",
            weights.len(),
            design.p()
        )));
    }
    let p = design.p();
    let mut g = vec![0.0; p];
    for i in 0..design.n_rows() {
        let wy = design.weights[i] * design.y[i];
        for (j, &xj) in design.x.row(i).iter().enumerate() {
            g[j] += wy * xj;
        }
    }
    let mut best = 0.0f64;
    for j in 0..p {
        if weights[j].is_finite() {
            let v = g[j].abs() / weights[j];
            if v > best {
                best = v;
            }
        }
    }
    if !(best.is_finite() && best > 0.0) {
        return Err(Error::Numeric(
            "no non-excluded covariate has a nonzero weighted score; the penalized path is degenerate".into(),
        ));
    }
    Ok(best)
}

/// `n` log-spaced penalties from `top` down to `top * min_ratio`.
fn lambda_grid(top: f64, n: usize, min_ratio: f64) -> Vec<f64> {
    let log_ratio = min_ratio.ln();
    (0..n)
        .map(|i| top * (log_ratio * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// `n` mixing values spread over [0, 1]; a single value means pure LASSO.
fn alpha_grid(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// First strict minimum scanning penalties from largest to smallest and
/// mixing values in ascending order, so ties prefer the stronger penalty
/// and then the smaller mixing value.
fn grid_argmin(err: &[Vec<f64>]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_e = f64::INFINITY;
    for (li, row) in err.iter().enumerate() {
        for (ai, &e) in row.iter().enumerate() {
            if e < best_e {
                best_e = e;
                best = (li, ai);
            }
        }
    }
    best
}

/// Walk the (alpha, lambda) grid warm-starting each fit from the previous
/// penalty in its alpha chain. Visits every fit in a fixed order.
fn walk_path<F: FnMut(&PenalizedFit, usize, usize)>(
    solver: &EnetSolver,
    lambdas: &[f64],
    alphas: &[f64],
    weights: &[f64],
    tol: f64,
    max_iter: usize,
    mut visit: F,
) {
    for (ai, &alpha) in alphas.iter().enumerate() {
        let mut warm: Option<Vec<f64>> = None;
        for (li, &lambda) in lambdas.iter().enumerate() {
            let fit = solver.solve(lambda, alpha, weights, warm.as_deref(), tol, max_iter);
            warm = Some(fit.coefficients.clone());
            visit(&fit, li, ai);
        }
    }
}

/// Mean over rows of w r^2 / mean of w: the weighted validation error on a
/// stacked row subset.
fn weighted_mse(design: &StackedDesign, fit: &PenalizedFit) -> f64 {
    let nz = fit.selected();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..design.n_rows() {
        let row = design.x.row(i);
        let mut pred = fit.intercept;
        for &j in &nz {
            pred += fit.coefficients[j] * row[j];
        }
        let r = design.y[i] - pred;
        num += design.weights[i] * r * r;
        den += design.weights[i];
    }
    num / den
}

/// Mean over completed sets of the per-set mean squared error.
fn mean_mse_on_sets(fit: &PenalizedFit, sets: &[CompletedDataset]) -> f64 {
    let nz = fit.selected();
    let mut total = 0.0;
    for s in sets {
        let mut sse = 0.0;
        for i in 0..s.n() {
            let row = s.x.row(i);
            let mut pred = fit.intercept;
            for &j in &nz {
                pred += fit.coefficients[j] * row[j];
            }
            let r = s.y[i] - pred;
            sse += r * r;
        }
        total += sse / s.n() as f64;
    }
    total / sets.len() as f64
}

/// Derive adaptive penalty weights from a preliminary equal-weight elastic
/// net tuned on the design itself: subject-level K-fold selection over the
/// given grids (every stacked copy of a subject travels with it), refit at
/// the chosen pair, invert the coefficient magnitudes. Errors when the
/// preliminary fit keeps nothing, since that leaves no coordinates to fit.
pub fn adaptive_weights_from_senet(
    design: &StackedDesign,
    lambdas: &[f64],
    alphas: &[f64],
    k: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<(Vec<f64>, PenalizedFit)> {
    if lambdas.is_empty() || alphas.is_empty() {
        return Err(Error::EmptyInput("preliminary tuning needs nonempty grids".into()));
    }
    let ones = vec![1.0; design.p()];
    let folds = make_folds(design.n_subjects, k, seed)?;
    let mut err = vec![vec![0.0; alphas.len()]; lambdas.len()];
    for fold in 0..k {
        let mut train_rows = Vec::new();
        let mut val_rows = Vec::new();
        for (r, o) in design.origin.iter().enumerate() {
            if folds.fold_of[o.1] == fold {
                val_rows.push(r);
            } else {
                train_rows.push(r);
            }
        }
        let train = design.subset_rows(&train_rows);
        let val = design.subset_rows(&val_rows);
        let solver = EnetSolver::new(&train);
        walk_path(&solver, lambdas, alphas, &ones, tol, max_iter, |fit, li, ai| {
            err[li][ai] += weighted_mse(&val, fit);
        });
    }
    for row in &mut err {
        for e in row.iter_mut() {
            *e /= k as f64;
        }
    }
    let (bi, ba) = grid_argmin(&err);
    let solver = EnetSolver::new(design);
    let prelim = solver.solve(lambdas[bi], alphas[ba], &ones, None, tol, max_iter);
    let w = adaptive_weights(&prelim.coefficients);
    if w.iter().all(|v| v.is_infinite()) {
        return Err(Error::Numeric(
            "preliminary elastic net kept no coefficients; its grid over-shrinks this data".into(),
        ));
    }
    Ok((w, prelim))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StackedMethod {
    /// Adaptive LASSO on the stacked design: mixing fixed at 1.
    SaLasso,
    /// Adaptive elastic net: mixing tuned over a grid on [0, 1].
    SaEnet,
}

impl StackedMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            StackedMethod::SaLasso => "salasso",
            StackedMethod::SaEnet => "saenet",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StackedConfig {
    /// Imputations per fold and for the final model.
    pub m: usize,
    /// Folds, both for the outer protocol and the preliminary fit's inner
    /// subject-level selection.
    pub k: usize,
    pub n_lambda: usize,
    /// The grid bottom as a fraction of the largest penalty.
    pub lambda_min_ratio: f64,
    /// Mixing grid size for the elastic net and the preliminary fit; 1
    /// degenerates to pure LASSO.
    pub n_alpha: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub mice: MiceConfig,
    pub seed: u64,
}

impl Default for StackedConfig {
    fn default() -> Self {
        StackedConfig {
            m: 10,
            k: 5,
            n_lambda: 200,
            lambda_min_ratio: 1e-4,
            n_alpha: 41,
            tol: 1e-7,
            max_iter: 1000,
            mice: MiceConfig::default(),
            seed: 0,
        }
    }
}

impl StackedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 {
            return Err(Error::InvalidArgument("need at least one imputation".into()));
        }
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 folds, got {}", self.k)));
        }
        if self.n_lambda < 2 {
            return Err(Error::InvalidArgument("penalty grid needs at least 2 values".into()));
        }
        if !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "grid bottom ratio must lie in (0, 1), got {}",
                self.lambda_min_ratio
            )));
        }
        if self.n_alpha < 1 {
            return Err(Error::InvalidArgument("mixing grid needs at least 1 value".into()));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidArgument("need tol > 0 and at least one sweep".into()));
        }
        Ok(())
    }
}

/// Outcome of tuning one stacked method: the fold-mean validation error
/// over the whole grid, the chosen pair, and the final full-data refit with
/// full-data adaptive weights. Carries the full-data imputation models so
/// the fit can score new incomplete data.
#[derive(Debug, Clone, Serialize)]
pub struct GridSearchResult {
    pub method: StackedMethod,
    /// Descending.
    pub lambda_grid: Vec<f64>,
    /// Ascending.
    pub alpha_grid: Vec<f64>,
    /// Indexed [lambda][alpha].
    pub cv_error: Vec<Vec<f64>>,
    pub best_lambda: f64,
    pub best_alpha: f64,
    pub fit: PenalizedFit,
    /// Full-data adaptive weights behind `fit`.
    pub adaptive_weights: Vec<f64>,
    pub prelim_fit: PenalizedFit,
    pub models: Vec<ImputationModel>,
    pub centerings: Vec<CenteringInfo>,
}

impl GridSearchResult {
    pub fn selected(&self) -> Vec<usize> {
        self.fit.selected()
    }

    /// Complete new data with each stored model, center with the stored
    /// training means, score, and average the M predictions per row.
    pub fn predict(&self, d: &MissingDataset, seed: u64) -> Result<Vec<f64>> {
        let m = self.models.len();
        let nz = self.fit.selected();
        let mut out = vec![0.0; d.n()];
        for mi in 0..m {
            let completed = mice_apply(&self.models[mi], d, seed)?;
            let centered = crate::data::center_apply(&completed, &self.centerings[mi])?;
            for (i, slot) in out.iter_mut().enumerate() {
                let row = centered.x.row(i);
                let mut pred = self.fit.intercept;
                for &j in &nz {
                    pred += self.fit.coefficients[j] * row[j];
                }
                *slot += pred;
            }
        }
        for slot in &mut out {
            *slot /= m as f64;
        }
        Ok(out)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Tune stacked methods on already-imputed protocol data. One preliminary
/// fit per fold supplies that fold's adaptive weights; the full-data
/// preliminary fit supplies the shared penalty grid and the weights of the
/// final refit. Fits along a penalty chain are warm-started; every fold is
/// evaluated on its held-out completions, and grid means decide the pair.
pub fn tune_stacked_prepared(
    prep: &ProtocolPrep,
    methods: &[StackedMethod],
    cfg: &StackedConfig,
) -> Result<Vec<GridSearchResult>> {
    cfg.validate()?;
    if methods.is_empty() {
        return Ok(Vec::new());
    }
    let k = prep.fold_data.len();
    if k < 2 {
        return Err(Error::InvalidArgument("the protocol needs at least 2 folds".into()));
    }
    let full_design = stack(&prep.full)?;
    let p = full_design.p();
    let ones = vec![1.0; p];
    let alphas_enet = alpha_grid(cfg.n_alpha);
    let eq_top = lambda_max(&full_design, &ones)?;
    let eq_grid = lambda_grid(eq_top, cfg.n_lambda, cfg.lambda_min_ratio);
    let (w_full, prelim_full) = adaptive_weights_from_senet(
        &full_design,
        &eq_grid,
        &alphas_enet,
        cfg.k,
        cfg.tol,
        cfg.max_iter,
        rng::derive_seed(cfg.seed, "senet-inner-full", &[]),
    )?;
    let ad_top = lambda_max(&full_design, &w_full)?;
    let ad_grid = lambda_grid(ad_top, cfg.n_lambda, cfg.lambda_min_ratio);
    let method_alphas: Vec<Vec<f64>> = methods
        .iter()
        .map(|mt| match mt {
            StackedMethod::SaLasso => vec![1.0],
            StackedMethod::SaEnet => alphas_enet.clone(),
        })
        .collect();

    // err[fold][method][lambda][alpha]
    let fold_errs: Vec<Vec<Vec<Vec<f64>>>> = prep
        .fold_data
        .par_iter()
        .enumerate()
        .map(|(f, fd)| -> Result<Vec<Vec<Vec<f64>>>> {
            let t_design = stack(&fd.train)?;
            let (w_f, _) = adaptive_weights_from_senet(
                &t_design,
                &eq_grid,
                &alphas_enet,
                cfg.k,
                cfg.tol,
                cfg.max_iter,
                rng::derive_seed(cfg.seed, "senet-inner", &[f as u64]),
            )?;
            let solver = EnetSolver::new(&t_design);
            let mut per_method = Vec::with_capacity(methods.len());
            for alphas in &method_alphas {
                let mut err = vec![vec![0.0; alphas.len()]; ad_grid.len()];
                walk_path(&solver, &ad_grid, alphas, &w_f, cfg.tol, cfg.max_iter, |fit, li, ai| {
                    err[li][ai] = mean_mse_on_sets(fit, &fd.val);
                });
                per_method.push(err);
            }
            Ok(per_method)
        })
        .collect::<Result<Vec<_>>>()?;

    let full_solver = EnetSolver::new(&full_design);
    let mut out = Vec::with_capacity(methods.len());
    for (mi, &method) in methods.iter().enumerate() {
        let alphas = &method_alphas[mi];
        let mut cv = vec![vec![0.0; alphas.len()]; ad_grid.len()];
        for fe in &fold_errs {
            for (li, row) in fe[mi].iter().enumerate() {
                for (ai, &e) in row.iter().enumerate() {
                    cv[li][ai] += e;
                }
            }
        }
        for row in &mut cv {
            for e in row.iter_mut() {
                *e /= k as f64;
            }
        }
        let (bi, ba) = grid_argmin(&cv);
        let fit = full_solver.solve(ad_grid[bi], alphas[ba], &w_full, None, cfg.tol, cfg.max_iter);
        out.push(GridSearchResult {
            method,
            lambda_grid: ad_grid.clone(),
            alpha_grid: alphas.clone(),
            cv_error: cv,
            best_lambda: ad_grid[bi],
            best_alpha: alphas[ba],
            fit,
            adaptive_weights: w_full.clone(),
            prelim_fit: prelim_full.clone(),
            models: prep.full_models.clone(),
            centerings: prep.full_centerings.clone(),
        });
    }
    Ok(out)
}

/// Impute per the fold protocol, then tune one stacked method.
pub fn tune_stacked(
    method: StackedMethod,
    d: &MissingDataset,
    cfg: &StackedConfig,
) -> Result<GridSearchResult> {
    let prep = prepare_protocol(d, cfg.m, cfg.k, &cfg.mice, cfg.seed)?;
    let mut v = tune_stacked_prepared(&prep, &[method], cfg)?;
    Ok(v.pop().expect("one method in, one result out"))
}

/// Tune both stacked methods on one shared set of fold completions and one
/// shared preliminary fit.
pub fn tune_stacked_all(d: &MissingDataset, cfg: &StackedConfig) -> Result<(GridSearchResult, GridSearchResult)> {
    let prep = prepare_protocol(d, cfg.m, cfg.k, &cfg.mice, cfg.seed)?;
    let mut v = tune_stacked_prepared(&prep, &[StackedMethod::SaLasso, StackedMethod::SaEnet], cfg)?;
    let enet = v.pop().expect("two methods in");
    let lasso = v.pop().expect("two methods in");
    Ok((lasso, enet))
}

/// Estimate-averaging boosting: each completed dataset picks its own
/// stopping iteration by ordinary K-fold selection within itself (no
/// re-imputation), fits alone, and the coefficient vectors are averaged. A
/// covariate counts as selected when any dataset selected it.
#[derive(Debug, Clone, Serialize)]
pub struct EaBoostFit {
    /// Per-dataset coefficients and their mean; the joint selection path is
    /// empty because selection was never coupled.
    pub fit: BoostFit,
    pub t_stars: Vec<usize>,
    /// Union of the per-dataset selected sets, ascending.
    pub selected: Vec<usize>,
}

impl EaBoostFit {
    pub fn mean_t_star(&self) -> f64 {
        self.t_stars.iter().sum::<usize>() as f64 / self.t_stars.len() as f64
    }
}

pub fn ea_boost<L: Loss>(
    data: &[CompletedDataset],
    loss: &L,
    nu: f64,
    k: usize,
    t_stop_max: usize,
    seed: u64,
) -> Result<EaBoostFit> {
    if data.is_empty() {
        return Err(Error::EmptyInput("boosting requires at least one completed dataset".into()));
    }
    let n = data[0].n();
    // One fold split shared by all datasets: identical completions then
    // agree on the stopping iteration.
    let folds = make_folds(n, k, rng::derive_seed(seed, "ea-cv", &[]))?;
    let mut offsets = Vec::with_capacity(data.len());
    let mut coefficients = Vec::with_capacity(data.len());
    let mut t_stars = Vec::with_capacity(data.len());
    let mut union = BTreeSet::new();
    let mut nu_out = nu;
    for d in data.iter() {
        let mut per_fold = Vec::with_capacity(k);
        for f in 0..k {
            let train = [d.subset(&folds.complement_rows(f))];
            let val = [d.subset(&folds.fold_rows(f))];
            let eval_rows: Vec<usize> = (0..val[0].n()).collect();
            let (errors, _) = fold_curve(&train, &val, &eval_rows, nu, t_stop_max, loss)?;
            per_fold.push(errors);
        }
        let curve = CvCurve::from_folds(per_fold);
        let fit = run_miboost(std::slice::from_ref(d), loss, nu, curve.t_star, Offset::Mean)?;
        offsets.push(fit.offsets[0]);
        coefficients.push(fit.coefficients[0].clone());
        union.extend(fit.selected_set());
        t_stars.push(curve.t_star);
        nu_out = fit.nu;
    }
    let width = coefficients[0].len();
    let mut averaged = vec![0.0; width];
    for c in &coefficients {
        for (a, &v) in averaged.iter_mut().zip(c) {
            *a += v;
        }
    }
    for a in &mut averaged {
        *a /= coefficients.len() as f64;
    }
    Ok(EaBoostFit {
        fit: BoostFit {
            offsets,
            coefficients,
            averaged,
            selection_path: Vec::new(),
            nu: nu_out,
        },
        t_stars,
        selected: union.into_iter().collect(),
    })
}
