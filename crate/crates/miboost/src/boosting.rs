//! Component-wise gradient boosting with coupled selection across imputations.
//!
//! Every iteration fits one simple linear learner (intercept + slope) per
//! covariate to the current pseudo-residuals, separately in each of the M
//! completed datasets, then picks the single component whose residual sum of
//! squares summed over all M datasets is smallest. All datasets update that
//! same component, so the selected covariate set is identical across
//! imputations and the fitted learners can be averaged at the end.
//!
//! Covariates are expected to be centered (per dataset); the response is not.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::CompletedDataset;
use crate::error::{Error, Result};

/// Differentiable loss ρ(y, η) with its negative gradient in η.
pub trait Loss {
    fn evaluate(&self, y: f64, eta: f64) -> f64;
    fn negative_gradient(&self, y: f64, eta: f64) -> f64;
}

/// ρ(y, η) = ½(y − η)²; the workhorse loss. Its negative gradient is the
/// plain residual y − η, and its offset minimizer is the response mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredError;

impl Loss for SquaredError {
    #[inline]
    fn evaluate(&self, y: f64, eta: f64) -> f64 {
        0.5 * (y - eta) * (y - eta)
    }

    #[inline]
    fn negative_gradient(&self, y: f64, eta: f64) -> f64 {
        y - eta
    }
}

/// Predictor initialization policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Offset {
    /// Per-dataset response mean (the squared-error minimizer).
    #[default]
    Mean,
    Zero,
}

/// One ordinary-least-squares line fit of pseudo-residuals on a covariate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearLearnerFit {
    pub intercept: f64,
    pub slope: f64,
    pub rss: f64,
}

/// Closed-form OLS of `u` on an intercept plus `x`. A covariate with
/// (population) variance below 1e-12 gets slope 0 and intercept mean(u).
pub fn fit_linear_learner(u: &[f64], x: &[f64]) -> LinearLearnerFit {
    assert_eq!(u.len(), x.len(), "learner inputs must have equal length");
    assert!(u.len() >= 2, "learner needs at least two observations");
    let n = u.len() as f64;
    let mean_u = u.iter().sum::<f64>() / n;
    let mean_x = x.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxu = 0.0;
    for (&xi, &ui) in x.iter().zip(u) {
        sxx += (xi - mean_x) * (xi - mean_x);
        sxu += (xi - mean_x) * (ui - mean_u);
    }
    let var_x = sxx / n;
    let slope = if var_x < 1e-12 { 0.0 } else { sxu / sxx };
    let intercept = mean_u - slope * mean_x;
    let rss = x
        .iter()
        .zip(u)
        .map(|(&xi, &ui)| {
            let r = ui - intercept - slope * xi;
            r * r
        })
        .sum();
    LinearLearnerFit { intercept, slope, rss }
}

/// Joint selection: the component minimizing rss summed over datasets, ties
/// to the smallest index. `rss_grid[m][r]` indexes dataset m, component r.
pub fn select_component(rss_grid: &[Vec<f64>]) -> usize {
    let p = rss_grid[0].len();
    let mut best = 0;
    let mut best_l = f64::INFINITY;
    for r in 0..p {
        let l: f64 = rss_grid.iter().map(|row| row[r]).sum();
        if l < best_l {
            best_l = l;
            best = r;
        }
    }
    best
}

/// Finished boosting model. `coefficients[m]` holds the accumulated intercept
/// at index 0 and the accumulated slope of covariate j at index j+1, all
/// already scaled by the step length; `averaged` is their cross-dataset mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostFit {
    pub offsets: Vec<f64>,
    pub coefficients: Vec<Vec<f64>>,
    pub averaged: Vec<f64>,
    pub selection_path: Vec<usize>,
    pub nu: f64,
}

impl BoostFit {
    pub fn m(&self) -> usize {
        self.offsets.len()
    }

    pub fn p(&self) -> usize {
        self.averaged.len() - 1
    }

    pub fn t_stop(&self) -> usize {
        self.selection_path.len()
    }

    pub fn mean_offset(&self) -> f64 {
        self.offsets.iter().sum::<f64>() / self.offsets.len() as f64
    }

    /// Distinct selected components, ascending.
    pub fn selected_set(&self) -> Vec<usize> {
        let mut sel: Vec<usize> = self.selection_path.clone();
        sel.sort_unstable();
        sel.dedup();
        sel
    }

    /// Averaged-model prediction for one centered covariate row.
    pub fn predict_averaged(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.p() {
            return Err(Error::Dimension(format!(
                "prediction row has {} covariates, model has {}",
                x.len(),
                self.p()
            )));
        }
        let mut eta = self.mean_offset() + self.averaged[0];
        for (j, &xj) in x.iter().enumerate() {
            eta += self.averaged[j + 1] * xj;
        }
        Ok(eta)
    }

    /// Single-dataset prediction for one centered covariate row.
    pub fn predict_dataset(&self, m: usize, x: &[f64]) -> Result<f64> {
        if x.len() != self.p() {
            return Err(Error::Dimension(format!(
                "prediction row has {} covariates, model has {}",
                x.len(),
                self.p()
            )));
        }
        let c = &self.coefficients[m];
        let mut eta = self.offsets[m] + c[0];
        for (j, &xj) in x.iter().enumerate() {
            eta += c[j + 1] * xj;
        }
        Ok(eta)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Per-dataset increments of one boosting step, step length included.
#[derive(Debug, Clone)]
pub struct StepUpdate {
    pub component: usize,
    /// (intercept increment, slope increment) per dataset.
    pub deltas: Vec<(f64, f64)>,
}

struct DatasetState {
    /// Column-major covariates.
    cols: Vec<Vec<f64>>,
    /// Per-column sums and sums of squares, fixed across iterations.
    sx: Vec<f64>,
    sxx: Vec<f64>,
    y: Vec<f64>,
    eta: Vec<f64>,
    u: Vec<f64>,
}

/// Incremental driver for the coupled boosting loop. `step` runs one
/// iteration; `fit` snapshots the accumulated model.
pub struct BoostRun<'a, L: Loss> {
    states: Vec<DatasetState>,
    coefficients: Vec<Vec<f64>>,
    offsets: Vec<f64>,
    selection_path: Vec<usize>,
    nu: f64,
    loss: &'a L,
    rss_grid: Vec<Vec<f64>>,
}

impl<'a, L: Loss> BoostRun<'a, L> {
    /// `data` must hold at least one dataset; all must share n ≥ 2 and p ≥ 1,
    /// with covariates centered.
    pub fn new(data: &[CompletedDataset], loss: &'a L, nu: f64, offset: Offset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("boosting needs at least one dataset".into()));
        }
        let n = data[0].n();
        let p = data[0].p();
        if n < 2 || p < 1 {
            return Err(Error::InvalidArgument(format!(
                "boosting needs n >= 2 and p >= 1, got n={n}, p={p}"
            )));
        }
        if !(nu.is_finite() && nu > 0.0) {
            return Err(Error::InvalidArgument(format!("step length must be positive, got {nu}")));
        }
        for d in data {
            if d.n() != n || d.p() != p {
                return Err(Error::Dimension(
                    "all datasets must share the same shape".into(),
                ));
            }
        }
        let mut states = Vec::with_capacity(data.len());
        let mut offsets = Vec::with_capacity(data.len());
        for d in data {
            let cols: Vec<Vec<f64>> = (0..p).map(|j| d.x.column(j)).collect();
            let sx: Vec<f64> = cols.iter().map(|c| c.iter().sum()).collect();
            let sxx: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
            let off = match offset {
                Offset::Mean => d.y.iter().sum::<f64>() / n as f64,
                Offset::Zero => 0.0,
            };
            offsets.push(off);
            states.push(DatasetState {
                cols,
                sx,
                sxx,
                y: d.y.clone(),
                eta: vec![off; n],
                u: vec![0.0; n],
            });
        }
        Ok(BoostRun {
            coefficients: vec![vec![0.0; p + 1]; data.len()],
            states,
            offsets,
            selection_path: Vec::new(),
            nu,
            loss,
            rss_grid: vec![vec![0.0; p]; data.len()],
        })
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    /// One coupled iteration: fit all learners in every dataset, select the
    /// component with the smallest summed rss (ties to the smallest index),
    /// and move every dataset's predictor along its own fitted learner.
    pub fn step(&mut self) -> Result<StepUpdate> {
        let p = self.rss_grid[0].len();
        let mut fits: Vec<Vec<(f64, f64)>> = Vec::with_capacity(self.states.len());
        for (m, st) in self.states.iter_mut().enumerate() {
            let n = st.y.len() as f64;
            let mut su = 0.0;
            let mut suu = 0.0;
            for i in 0..st.y.len() {
                let g = self.loss.negative_gradient(st.y[i], st.eta[i]);
                st.u[i] = g;
                su += g;
                suu += g * g;
            }
            if !(su.is_finite() && suu.is_finite()) {
                return Err(Error::Numeric(
                    "non-finite pseudo-residuals: loss and data are incompatible".into(),
                ));
            }
            let mut mfits = Vec::with_capacity(p);
            for r in 0..p {
                let col = &st.cols[r];
                let mut sxu = 0.0;
                for (xi, ui) in col.iter().zip(&st.u) {
                    sxu += xi * ui;
                }
                let sx = st.sx[r];
                let sxx = st.sxx[r];
                let cov_n = sxu - sx * su / n;
                let var_n = sxx - sx * sx / n;
                let slope = if var_n / n < 1e-12 { 0.0 } else { cov_n / var_n };
                let intercept = su / n - slope * sx / n;
                let rss = suu - 2.0 * intercept * su - 2.0 * slope * sxu
                    + n * intercept * intercept
                    + 2.0 * intercept * slope * sx
                    + slope * slope * sxx;
                self.rss_grid[m][r] = rss;
                mfits.push((intercept, slope));
            }
            fits.push(mfits);
        }
        let component = select_component(&self.rss_grid);
        let mut deltas = Vec::with_capacity(self.states.len());
        for (m, st) in self.states.iter_mut().enumerate() {
            let (b0, b1) = fits[m][component];
            let d0 = self.nu * b0;
            let d1 = self.nu * b1;
            self.coefficients[m][0] += d0;
            self.coefficients[m][component + 1] += d1;
            let col = &st.cols[component];
            for (ei, xi) in st.eta.iter_mut().zip(col) {
                *ei += d0 + d1 * xi;
            }
            deltas.push((d0, d1));
        }
        self.selection_path.push(component);
        Ok(StepUpdate { component, deltas })
    }

    /// Total training loss Σ_m Σ_i ρ(y, η) at the current state.
    pub fn training_loss(&self) -> f64 {
        self.states
            .iter()
            .map(|st| {
                st.y
                    .iter()
                    .zip(&st.eta)
                    .map(|(&y, &e)| self.loss.evaluate(y, e))
                    .sum::<f64>()
            })
            .sum()
    }

    /// Snapshot the accumulated model; averaging is the exact arithmetic mean.
    pub fn fit(&self) -> BoostFit {
        let m = self.states.len();
        let k = self.coefficients[0].len();
        let mut averaged = vec![0.0; k];
        for c in &self.coefficients {
            for (a, v) in averaged.iter_mut().zip(c) {
                *a += v;
            }
        }
        for a in &mut averaged {
            *a /= m as f64;
        }
        BoostFit {
            offsets: self.offsets.clone(),
            coefficients: self.coefficients.clone(),
            averaged,
            selection_path: self.selection_path.clone(),
            nu: self.nu,
        }
    }
}

/// Run the coupled boosting loop for a fixed number of iterations.
pub fn run_miboost<L: Loss>(
    data: &[CompletedDataset],
    loss: &L,
    nu: f64,
    t_stop: usize,
    offset: Offset,
) -> Result<BoostFit> {
    let mut run = BoostRun::new(data, loss, nu, offset)?;
    for _ in 0..t_stop {
        run.step()?;
    }
    Ok(run.fit())
}

/// Component-wise gradient boosting on a single dataset. Independent of the
/// coupled driver: plain vectors and the closed-form learner fit.
pub fn run_cwgb<L: Loss>(
    data: &CompletedDataset,
    loss: &L,
    nu: f64,
    t_stop: usize,
    offset: Offset,
) -> Result<BoostFit> {
    let n = data.n();
    let p = data.p();
    if n < 2 || p < 1 {
        return Err(Error::InvalidArgument(format!(
            "boosting needs n >= 2 and p >= 1, got n={n}, p={p}"
        )));
    }
    if !(nu.is_finite() && nu > 0.0) {
        return Err(Error::InvalidArgument(format!("step length must be positive, got {nu}")));
    }
    let cols: Vec<Vec<f64>> = (0..p).map(|j| data.x.column(j)).collect();
    let off = match offset {
        Offset::Mean => data.y.iter().sum::<f64>() / n as f64,
        Offset::Zero => 0.0,
    };
    let mut eta = vec![off; n];
    let mut coefficients = vec![0.0; p + 1];
    let mut selection_path = Vec::with_capacity(t_stop);
    for _ in 0..t_stop {
        let u: Vec<f64> = data
            .y
            .iter()
            .zip(&eta)
            .map(|(&y, &e)| loss.negative_gradient(y, e))
            .collect();
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "non-finite pseudo-residuals: loss and data are incompatible".into(),
            ));
        }
        let fits: Vec<LinearLearnerFit> = cols.iter().map(|c| fit_linear_learner(&u, c)).collect();
        let mut best = 0;
        for r in 1..p {
            if fits[r].rss < fits[best].rss {
                best = r;
            }
        }
        let f = fits[best];
        coefficients[0] += nu * f.intercept;
        coefficients[best + 1] += nu * f.slope;
        for (ei, xi) in eta.iter_mut().zip(&cols[best]) {
            *ei += nu * (f.intercept + f.slope * xi);
        }
        selection_path.push(best);
    }
    Ok(BoostFit {
        offsets: vec![off],
        coefficients: vec![coefficients.clone()],
        averaged: coefficients,
        selection_path,
        nu,
    })
}
