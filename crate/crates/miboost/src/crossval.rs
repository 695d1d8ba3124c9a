//! Leakage-free K-fold selection of the boosting stopping iteration.
//!
//! The protocol splits BEFORE imputing: each fold's training part is imputed
//! on its own, the held-out part is filled with the training-fitted models,
//! and both parts are centered with training means. The validation curve
//! therefore never sees information derived from held-out rows. The final
//! model re-imputes the full dataset and reruns the boosting loop for the
//! selected iteration count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::boosting::{BoostFit, BoostRun, Loss, Offset};
use crate::data::{
    center_apply, center_fit, make_folds, CenteringInfo, CompletedDataset, FoldAssignment,
    MissingDataset,
};
use crate::error::{Error, Result};
use crate::imputation::{mice_apply, mice_fit, ImputationModel, MiceConfig};
use crate::rng;

/// Cross-validation settings. The loss is passed to the run functions
/// separately so the config stays serializable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvConfig {
    /// Number of folds (≥ 2).
    pub k: usize,
    /// Imputations per fold and for the final model (≥ 1).
    pub m: usize,
    /// Largest stopping iteration evaluated; the curve covers 0..=t_stop_max.
    pub t_stop_max: usize,
    /// Boosting step length, in (0, 1].
    pub nu: f64,
    pub mice: MiceConfig,
    pub seed: u64,
    /// Restrict validation error to rows whose response was observed in the
    /// source data (sensitivity analysis; imputed-response rows count when
    /// false, which is the default).
    pub observed_response_only: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k: 5,
            m: 10,
            t_stop_max: 1000,
            nu: 0.1,
            mice: MiceConfig::default(),
            seed: 0,
            observed_response_only: false,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 folds, got {}", self.k)));
        }
        if self.m < 1 {
            return Err(Error::InvalidArgument("need at least one imputation".into()));
        }
        if self.t_stop_max < 1 {
            return Err(Error::InvalidArgument("iteration budget must be at least 1".into()));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "step length must lie in (0,1], got {}",
                self.nu
            )));
        }
        Ok(())
    }
}

/// Validation-error curves: per fold and averaged, over t = 0..=t_stop_max.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    pub errors: Vec<f64>,
    pub per_fold: Vec<Vec<f64>>,
    pub t_star: usize,
}

impl CvCurve {
    /// Combine per-fold error curves: pointwise mean, then the smallest
    /// iteration count attaining the minimum.
    pub fn from_folds(per_fold: Vec<Vec<f64>>) -> CvCurve {
        let k = per_fold.len() as f64;
        let len = per_fold[0].len();
        let errors: Vec<f64> = (0..len)
            .map(|t| per_fold.iter().map(|f| f[t]).sum::<f64>() / k)
            .collect();
        let mut t_star = 0;
        for (t, &e) in errors.iter().enumerate() {
            if e < errors[t_star] {
                t_star = t;
            }
        }
        CvCurve { errors, per_fold, t_star }
    }

    pub fn min_error(&self) -> f64 {
        self.errors[self.t_star]
    }

    /// CSV report with one row per (fold, t); folds are 1-based.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("fold,t,error\n");
        for (k, fold) in self.per_fold.iter().enumerate() {
            for (t, e) in fold.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", k + 1, t, e));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Everything produced for one fold: training-fitted imputation models,
/// training centering means, the boosting fit at the full iteration budget,
/// and the validation-error curve. None of it depends on held-out values
/// except `errors`.
#[derive(Debug, Clone)]
pub struct FoldArtifacts {
    pub models: Vec<ImputationModel>,
    pub centerings: Vec<CenteringInfo>,
    pub fit: BoostFit,
    pub errors: Vec<f64>,
}

/// Mean over datasets of the averaged model's mean squared error, each
/// dataset evaluated with its own completed responses.
pub fn validation_error(fit: &BoostFit, val_sets: &[CompletedDataset]) -> Result<f64> {
    if val_sets.is_empty() || val_sets[0].n() == 0 {
        return Err(Error::EmptyInput("validation requires at least one row".into()));
    }
    let mut total = 0.0;
    for v in val_sets {
        let mut sse = 0.0;
        for i in 0..v.n() {
            let pred = fit.predict_averaged(v.x.row(i))?;
            let r = v.y[i] - pred;
            sse += r * r;
        }
        total += sse / v.n() as f64;
    }
    Ok(total / val_sets.len() as f64)
}

/// One fold's imputation work, shared by every method that follows the
/// split-before-impute protocol: training part imputed M times, held-out
/// part completed with the training-fitted models, both centered with the
/// training means.
#[derive(Debug, Clone)]
pub struct ImputedFold {
    pub train: Vec<CompletedDataset>,
    pub val: Vec<CompletedDataset>,
    pub models: Vec<ImputationModel>,
    pub centerings: Vec<CenteringInfo>,
    /// Original observation mask of the held-out responses.
    pub val_y_observed: Vec<bool>,
}

/// Impute one fold. Seeds are derived from (seed, fold), so folds are
/// independent of the order they are processed in.
pub fn impute_fold(
    d: &MissingDataset,
    folds: &FoldAssignment,
    fold: usize,
    m: usize,
    mice: &MiceConfig,
    seed: u64,
) -> Result<ImputedFold> {
    let val_rows = folds.fold_rows(fold);
    let train_rows = folds.complement_rows(fold);
    let train = d.subset(&train_rows);
    let val = d.subset(&val_rows);
    let val_y_observed: Vec<bool> = (0..val.n()).map(|i| val.y_observed(i)).collect();

    let fit_seed = rng::derive_seed(seed, "cv-impute", &[fold as u64]);
    let apply_seed = rng::derive_seed(seed, "cv-transfer", &[fold as u64]);
    let set = mice_fit(&train, m, mice, fit_seed)?;

    let mut train_centered = Vec::with_capacity(m);
    let mut val_centered = Vec::with_capacity(m);
    let mut centerings = Vec::with_capacity(m);
    for i in 0..m {
        let completed_val = mice_apply(&set.models[i], &val, apply_seed)?;
        let c = center_fit(&set.completed[i]);
        train_centered.push(center_apply(&set.completed[i], &c)?);
        val_centered.push(center_apply(&completed_val, &c)?);
        centerings.push(c);
    }
    Ok(ImputedFold {
        train: train_centered,
        val: val_centered,
        models: set.models,
        centerings,
        val_y_observed,
    })
}

/// Boost on the fold's training completions for the full budget, tracking
/// the averaged model's error on the completed held-out sets at every
/// iteration count. `eval_rows` selects which held-out rows count.
pub fn fold_curve<L: Loss>(
    train: &[CompletedDataset],
    val: &[CompletedDataset],
    eval_rows: &[usize],
    nu: f64,
    t_stop_max: usize,
    loss: &L,
) -> Result<(Vec<f64>, BoostFit)> {
    if eval_rows.is_empty() {
        return Err(Error::EmptyInput("validation requires at least one row".into()));
    }
    let m = train.len();
    let mut run = BoostRun::new(train, loss, nu, Offset::Mean)?;
    let mean_offset = run.offsets().iter().sum::<f64>() / m as f64;
    // Averaged-model predictions on each completed held-out set, updated
    // incrementally: every iteration moves one component by the mean of the
    // per-dataset increments.
    let mut preds: Vec<Vec<f64>> = vec![vec![mean_offset; eval_rows.len()]; m];
    let mut errors = Vec::with_capacity(t_stop_max + 1);
    let mse_now = |preds: &Vec<Vec<f64>>| -> f64 {
        let mut total = 0.0;
        for (i, p) in preds.iter().enumerate() {
            let v = &val[i];
            let mut sse = 0.0;
            for (slot, &row) in eval_rows.iter().enumerate() {
                let r = v.y[row] - p[slot];
                sse += r * r;
            }
            total += sse / eval_rows.len() as f64;
        }
        total / m as f64
    };
    errors.push(mse_now(&preds));
    for _ in 0..t_stop_max {
        let up = run.step()?;
        let d0 = up.deltas.iter().map(|d| d.0).sum::<f64>() / m as f64;
        let d1 = up.deltas.iter().map(|d| d.1).sum::<f64>() / m as f64;
        for (i, p) in preds.iter_mut().enumerate() {
            let v = &val[i];
            for (slot, &row) in eval_rows.iter().enumerate() {
                p[slot] += d0 + d1 * v.x.get(row, up.component);
            }
        }
        errors.push(mse_now(&preds));
    }
    Ok((errors, run.fit()))
}

/// Run one fold of the protocol: impute the training part, transfer the
/// models to the held-out part, center both with training means, boost for
/// the full budget while tracking the averaged model's validation error at
/// every iteration count.
pub fn run_fold<L: Loss>(
    d: &MissingDataset,
    folds: &FoldAssignment,
    fold: usize,
    cfg: &CvConfig,
    loss: &L,
) -> Result<FoldArtifacts> {
    let imputed = impute_fold(d, folds, fold, cfg.m, &cfg.mice, cfg.seed)?;
    if !imputed.val_y_observed.iter().any(|&o| o) {
        return Err(Error::DegenerateSplit(format!(
            "fold {} has no observed responses in its held-out part",
            fold + 1
        )));
    }
    let eval_rows: Vec<usize> = if cfg.observed_response_only {
        (0..imputed.val_y_observed.len())
            .filter(|&i| imputed.val_y_observed[i])
            .collect()
    } else {
        (0..imputed.val_y_observed.len()).collect()
    };
    let (errors, fit) = fold_curve(
        &imputed.train,
        &imputed.val,
        &eval_rows,
        cfg.nu,
        cfg.t_stop_max,
        loss,
    )?;
    Ok(FoldArtifacts {
        models: imputed.models,
        centerings: imputed.centerings,
        fit,
        errors,
    })
}

/// Cross-validated boosting on multiply imputed data: the fold curves, the
/// selected iteration count, and a final model refitted on the full data,
/// together with the artifacts needed to complete and center new data.
#[derive(Debug, Clone)]
pub struct MiboostCvResult {
    pub curve: CvCurve,
    pub fit: BoostFit,
    pub models: Vec<ImputationModel>,
    pub centerings: Vec<CenteringInfo>,
}

impl MiboostCvResult {
    pub fn t_star(&self) -> usize {
        self.curve.t_star
    }

    /// Per-imputation predictions (M × n) for new, possibly incomplete rows:
    /// complete with each stored model, center with that imputation's means,
    /// apply the averaged model.
    pub fn predict_per_imputation(&self, d: &MissingDataset, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.models.len());
        for (m, model) in self.models.iter().enumerate() {
            let completed = mice_apply(model, d, seed)?;
            let centered = center_apply(&completed, &self.centerings[m])?;
            let preds: Vec<f64> = (0..centered.n())
                .map(|i| self.fit.predict_averaged(centered.x.row(i)))
                .collect::<Result<_>>()?;
            out.push(preds);
        }
        Ok(out)
    }

    /// Row predictions averaged over imputations.
    pub fn predict(&self, d: &MissingDataset, seed: u64) -> Result<Vec<f64>> {
        let per_m = self.predict_per_imputation(d, seed)?;
        let m = per_m.len() as f64;
        Ok((0..d.n())
            .map(|i| per_m.iter().map(|p| p[i]).sum::<f64>() / m)
            .collect())
    }

    pub fn write_summary_json(&self, cfg: &CvConfig, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            t_star: usize,
            min_error: f64,
            config: &'a CvConfig,
        }
        let s = Summary {
            t_star: self.curve.t_star,
            min_error: self.curve.min_error(),
            config: cfg,
        };
        let json = serde_json::to_string_pretty(&s)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// The full protocol: K folds (run concurrently, aggregated in fold order),
/// curve averaging, selection of the stopping iteration, and the final
/// full-data refit.
/// Everything the protocol imputes for one dataset: the fold assignment,
/// each fold's completions, and the full-data completions behind the final
/// model. Methods that share the protocol can split this work once instead
/// of re-imputing per method.
#[derive(Debug, Clone)]
pub struct ProtocolPrep {
    pub folds: FoldAssignment,
    pub fold_data: Vec<ImputedFold>,
    /// Full-data completions, centered within each.
    pub full: Vec<CompletedDataset>,
    pub full_models: Vec<ImputationModel>,
    pub full_centerings: Vec<CenteringInfo>,
}

/// Run the imputation side of the protocol: split, impute every fold, then
/// impute the full dataset for the final model. Fold work is parallel; all
/// seeds derive from (seed, fold), so the result does not depend on thread
/// count.
pub fn prepare_protocol(
    d: &MissingDataset,
    m: usize,
    k: usize,
    mice: &MiceConfig,
    seed: u64,
) -> Result<ProtocolPrep> {
    let folds = make_folds(d.n(), k, seed)?;
    let fold_data = (0..k)
        .into_par_iter()
        .map(|f| impute_fold(d, &folds, f, m, mice, seed))
        .collect::<Result<Vec<_>>>()?;
    let final_seed = rng::derive_seed(seed, "cv-final", &[]);
    let set = mice_fit(d, m, mice, final_seed)?;
    let mut full = Vec::with_capacity(m);
    let mut full_centerings = Vec::with_capacity(m);
    for completed in &set.completed {
        let c = center_fit(completed);
        full.push(center_apply(completed, &c)?);
        full_centerings.push(c);
    }
    Ok(ProtocolPrep {
        folds,
        fold_data,
        full,
        full_models: set.models,
        full_centerings,
    })
}

pub fn miboost_cv<L: Loss + Sync>(d: &MissingDataset, cfg: &CvConfig, loss: &L) -> Result<MiboostCvResult> {
    cfg.validate()?;
    let prep = prepare_protocol(d, cfg.m, cfg.k, &cfg.mice, cfg.seed)?;
    let mut per_fold = Vec::with_capacity(cfg.k);
    for (f, fd) in prep.fold_data.iter().enumerate() {
        if !fd.val_y_observed.iter().any(|&o| o) {
            return Err(Error::DegenerateSplit(format!(
                "fold {} has no observed responses in its held-out part",
                f + 1
            )));
        }
        let eval_rows: Vec<usize> = if cfg.observed_response_only {
            (0..fd.val_y_observed.len()).filter(|&i| fd.val_y_observed[i]).collect()
        } else {
            (0..fd.val_y_observed.len()).collect()
        };
        let (errors, _) = fold_curve(&fd.train, &fd.val, &eval_rows, cfg.nu, cfg.t_stop_max, loss)?;
        per_fold.push(errors);
    }
    let curve = CvCurve::from_folds(per_fold);

    let mut run = BoostRun::new(&prep.full, loss, cfg.nu, Offset::Mean)?;
    for _ in 0..curve.t_star {
        run.step()?;
    }
    let fit = run.fit();
    debug_assert_eq!(fit.t_stop(), curve.t_star);
    Ok(MiboostCvResult {
        curve,
        fit,
        models: prep.full_models,
        centerings: prep.full_centerings,
    })
}
