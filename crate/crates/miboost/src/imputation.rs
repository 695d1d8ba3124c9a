//! Chained-equations multiple imputation with predictive mean matching.
//!
//! `mice_fit` produces M completed copies of a dataset together with M
//! transferable models; `mice_apply` fills a new dataset (e.g. a validation
//! fold) using only the stored coefficients and training donor pools, so no
//! validation information flows into the imputation. Predictor sets are
//! screened by absolute Spearman correlation on pairwise-observed cells.
//!
//! Variables are indexed `0..p` for covariates and `p` for the response.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_completed_csv, CompletedDataset, Matrix, MissingDataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng;

/// Tuning knobs for the chained-equations imputer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiceConfig {
    /// Passes over the visit order after initialization.
    pub cycles: usize,
    /// Donors considered per missing cell (type-1 matching on predictions).
    pub donor_count: usize,
    /// Absolute Spearman threshold for predictor screening.
    pub screen_threshold: f64,
}

impl Default for MiceConfig {
    fn default() -> Self {
        MiceConfig {
            cycles: 5,
            donor_count: 5,
            screen_threshold: 0.1,
        }
    }
}

/// Fitted imputation state for one variable: regression from the final pass
/// plus its donor pool. Donors are (predicted value, observed target value)
/// pairs for every training-observed row, sorted by predicted value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableRecord {
    pub target: usize,
    pub predictors: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub donors: Vec<(f64, f64)>,
}

/// Transferable chained-equations model for one imputation. Records are in
/// visit order (descending training missing count, response last).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputationModel {
    pub imputation_index: usize,
    pub records: Vec<VariableRecord>,
    pub cycles: usize,
    pub donor_count: usize,
    pub names: Vec<String>,
    pub response_name: String,
}

/// The M completed datasets and their models from one `mice_fit` call.
#[derive(Debug, Clone)]
pub struct ImputationSet {
    pub completed: Vec<CompletedDataset>,
    pub models: Vec<ImputationModel>,
}

impl ImputationSet {
    pub fn m(&self) -> usize {
        self.completed.len()
    }
}

/// Spearman rank correlation over pairwise-observed entries (both finite).
/// Mid-ranks for ties; 0 when either side is constant on the common set.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "correlation inputs have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(&x, &y)| (x, y))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::ImputationPrecondition(format!(
            "need at least 2 pairwise-observed entries, got {}",
            pairs.len()
        )));
    }
    let ra = midranks(pairs.iter().map(|p| p.0));
    let rb = midranks(pairs.iter().map(|p| p.1));
    Ok(pearson(&ra, &rb))
}

/// Like [`spearman`] but total: degenerate inputs count as uncorrelated.
fn spearman_or_zero(a: &[f64], b: &[f64]) -> f64 {
    spearman(a, b).unwrap_or(0.0)
}

/// Average ranks (1-based), tied values sharing the mean of their positions.
fn midranks<I: Iterator<Item = f64>>(values: I) -> Vec<f64> {
    let vals: Vec<f64> = values.collect();
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && vals[order[j + 1]] == vals[order[i]] {
            j += 1;
        }
        // Positions i..=j share one value; mean 1-based rank.
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Column `v` of the dataset in variable indexing (`p` = response), with NaN
/// at masked cells.
fn variable_column(d: &MissingDataset, v: usize) -> Vec<f64> {
    if v == d.p() {
        d.y_raw().to_vec()
    } else {
        d.x_raw().column(v)
    }
}

/// All variables (covariates and response) except the target whose absolute
/// Spearman correlation with the target reaches the threshold; falls back to
/// the single best-correlated variable when none does.
pub fn screen_predictors(d: &MissingDataset, target: usize, threshold: f64) -> Vec<usize> {
    let p = d.p();
    let t_col = variable_column(d, target);
    let mut best: Option<(usize, f64)> = None;
    let mut kept = Vec::new();
    for v in 0..=p {
        if v == target {
            continue;
        }
        let rho = spearman_or_zero(&t_col, &variable_column(d, v)).abs();
        if rho >= threshold {
            kept.push(v);
        }
        if best.map(|(_, b)| rho > b).unwrap_or(true) {
            best = Some((v, rho));
        }
    }
    if kept.is_empty() {
        kept.push(best.expect("at least one candidate predictor").0);
    }
    kept
}

/// Working completion: covariates and response with all cells usable.
struct WorkingData {
    x: Matrix,
    y: Vec<f64>,
}

impl WorkingData {
    #[inline]
    fn value(&self, row: usize, v: usize) -> f64 {
        if v == self.x.n_cols() {
            self.y[row]
        } else {
            self.x.get(row, v)
        }
    }

    #[inline]
    fn set(&mut self, row: usize, v: usize, value: f64) {
        if v == self.x.n_cols() {
            self.y[row] = value;
        } else {
            self.x.set(row, v, value);
        }
    }
}

fn observed_rows(d: &MissingDataset, v: usize) -> Vec<usize> {
    let p = d.p();
    (0..d.n())
        .filter(|&i| if v == p { d.y_observed(i) } else { d.x_observed(i, v) })
        .collect()
}

fn missing_rows(d: &MissingDataset, v: usize) -> Vec<usize> {
    let p = d.p();
    (0..d.n())
        .filter(|&i| if v == p { !d.y_observed(i) } else { !d.x_observed(i, v) })
        .collect()
}

/// Visit order: variables with at least one missing cell, by descending
/// missing count (ties by index), the response always last.
fn visit_order(d: &MissingDataset) -> Vec<usize> {
    let p = d.p();
    let mut with_counts: Vec<(usize, usize)> = (0..p)
        .map(|v| (v, missing_rows(d, v).len()))
        .filter(|&(_, c)| c > 0)
        .collect();
    with_counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut order: Vec<usize> = with_counts.into_iter().map(|(v, _)| v).collect();
    if !missing_rows(d, p).is_empty() {
        order.push(p);
    }
    order
}

#[inline]
fn predict(coefficients: &[f64], predictors: &[usize], work: &WorkingData, row: usize) -> f64 {
    let mut v = coefficients[0];
    for (k, &pj) in predictors.iter().enumerate() {
        v += coefficients[k + 1] * work.value(row, pj);
    }
    v
}

/// Index window [lo, hi) of the `k` donors closest in prediction to `pred`
/// within a pool sorted by predicted value. Distance ties prefer the lower
/// predicted value, keeping the choice deterministic.
fn donor_window(pool: &[(f64, f64)], pred: f64, k: usize) -> (usize, usize) {
    let k = k.min(pool.len());
    let ins = pool.partition_point(|d| d.0 < pred);
    let (mut lo, mut hi) = (ins, ins);
    for _ in 0..k {
        let take_left = if lo == 0 {
            false
        } else if hi == pool.len() {
            true
        } else {
            pred - pool[lo - 1].0 <= pool[hi].0 - pred
        };
        if take_left {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    (lo, hi)
}

/// One donor draw: uniform among the window of nearest predictions.
fn draw_donor<R: Rng>(pool: &[(f64, f64)], pred: f64, k: usize, rng: &mut R) -> f64 {
    let (lo, hi) = donor_window(pool, pred, k);
    pool[lo + rng.random_range(0..hi - lo)].1
}

/// Initialization draws for every missing cell of `target`, uniform from a
/// value-sorted pool. Shared verbatim between fit and apply so that equal
/// seeds consume the stream identically.
fn init_variable<R: Rng>(
    d: &MissingDataset,
    target: usize,
    pool_sorted: &[f64],
    work: &mut WorkingData,
    rng: &mut R,
) {
    for row in missing_rows(d, target) {
        let v = pool_sorted[rng.random_range(0..pool_sorted.len())];
        work.set(row, target, v);
    }
}

fn check_preconditions(d: &MissingDataset, config: &MiceConfig) -> Result<()> {
    if config.cycles < 1 || config.donor_count < 1 {
        return Err(Error::InvalidArgument(
            "cycles and donor count must be at least 1".into(),
        ));
    }
    // Only variables that need a regression and donor pool are constrained;
    // a fully observed variable is predictor-only.
    let need = config.donor_count.max(2);
    for v in 0..=d.p() {
        if missing_rows(d, v).is_empty() {
            continue;
        }
        let n_obs = observed_rows(d, v).len();
        if n_obs < need {
            let name = if v == d.p() { d.response_name() } else { &d.names()[v] };
            return Err(Error::ImputationPrecondition(format!(
                "variable \"{name}\" has {n_obs} observed entries, need at least {need}"
            )));
        }
    }
    Ok(())
}

/// Fit M chained-equations imputations. Each imputation runs on an isolated
/// RNG stream keyed by (seed, index), so results do not depend on the order
/// the imputations are produced in.
pub fn mice_fit(d: &MissingDataset, m: usize, config: &MiceConfig, seed: u64) -> Result<ImputationSet> {
    if m < 1 {
        return Err(Error::InvalidArgument("need at least one imputation".into()));
    }
    check_preconditions(d, config)?;
    let p = d.p();
    let order = visit_order(d);

    if order.is_empty() {
        // Fully observed input: M identical copies, empty models.
        let done = CompletedDataset::new(d.y_raw().to_vec(), d.x_raw().clone())?;
        let models = (0..m)
            .map(|idx| ImputationModel {
                imputation_index: idx,
                records: Vec::new(),
                cycles: config.cycles,
                donor_count: config.donor_count,
                names: d.names().to_vec(),
                response_name: d.response_name().to_string(),
            })
            .collect();
        return Ok(ImputationSet {
            completed: vec![done; m],
            models,
        });
    }

    // Screening and row partitions depend only on the source data; compute
    // them once and share across imputations.
    let screened: Vec<Vec<usize>> = order
        .iter()
        .map(|&t| screen_predictors(d, t, config.screen_threshold))
        .collect();
    let obs_rows: Vec<Vec<usize>> = order.iter().map(|&t| observed_rows(d, t)).collect();
    let mis_rows: Vec<Vec<usize>> = order.iter().map(|&t| missing_rows(d, t)).collect();
    let init_pools: Vec<Vec<f64>> = order
        .iter()
        .zip(&obs_rows)
        .map(|(&t, rows)| {
            let mut vals: Vec<f64> = rows
                .iter()
                .map(|&i| if t == p { d.y_raw()[i] } else { d.x_raw().get(i, t) })
                .collect();
            vals.sort_by(f64::total_cmp);
            vals
        })
        .collect();

    let mut completed = Vec::with_capacity(m);
    let mut models = Vec::with_capacity(m);
    for idx in 0..m {
        let mut rng = rng::stream(seed, "mice", &[idx as u64]);
        let mut work = WorkingData {
            x: d.x_raw().clone(),
            y: d.y_raw().to_vec(),
        };
        for (oi, &t) in order.iter().enumerate() {
            init_variable(d, t, &init_pools[oi], &mut work, &mut rng);
        }

        let mut records: Vec<Option<VariableRecord>> = vec![None; order.len()];
        for cycle in 0..config.cycles {
            let last = cycle + 1 == config.cycles;
            for (oi, &t) in order.iter().enumerate() {
                let predictors = &screened[oi];
                let target_vals: Vec<f64> = obs_rows[oi]
                    .iter()
                    .map(|&i| work.value(i, t))
                    .collect();
                let coefficients = linalg::ols_with_intercept(
                    &obs_rows[oi],
                    predictors.len(),
                    |row, j| work.value(row, predictors[j]),
                    &target_vals,
                );
                let mut donors: Vec<(f64, f64)> = obs_rows[oi]
                    .iter()
                    .map(|&i| (predict(&coefficients, predictors, &work, i), work.value(i, t)))
                    .collect();
                donors.sort_by(|a, b| a.0.total_cmp(&b.0));
                for &row in &mis_rows[oi] {
                    let pred = predict(&coefficients, predictors, &work, row);
                    let v = draw_donor(&donors, pred, config.donor_count, &mut rng);
                    work.set(row, t, v);
                }
                if last {
                    records[oi] = Some(VariableRecord {
                        target: t,
                        predictors: predictors.clone(),
                        coefficients,
                        donors,
                    });
                }
            }
        }

        completed.push(CompletedDataset::new(work.y, work.x)?);
        models.push(ImputationModel {
            imputation_index: idx,
            records: records.into_iter().map(|r| r.expect("record stored on final cycle")).collect(),
            cycles: config.cycles,
            donor_count: config.donor_count,
            names: d.names().to_vec(),
            response_name: d.response_name().to_string(),
        });
    }
    Ok(ImputationSet { completed, models })
}

/// Fill a dataset using a fitted model: initialization draws from the stored
/// donor values, then one pass in the model's visit order with the stored
/// coefficients and training donor pools. Nothing is refitted.
pub fn mice_apply(model: &ImputationModel, d: &MissingDataset, seed: u64) -> Result<CompletedDataset> {
    if d.names() != model.names.as_slice() || d.response_name() != model.response_name {
        return Err(Error::SchemaMismatch(format!(
            "dataset columns do not match the model (expected response \"{}\" with {} covariates)",
            model.response_name,
            model.names.len()
        )));
    }
    let p = d.p();
    let covered: Vec<usize> = model.records.iter().map(|r| r.target).collect();
    for v in 0..=p {
        if !missing_rows(d, v).is_empty() && !covered.contains(&v) {
            let name = if v == p { d.response_name() } else { &d.names()[v] };
            return Err(Error::ModelCoverage(format!(
                "variable \"{name}\" has missing entries but the model holds no record for it"
            )));
        }
    }
    if !d.has_missing() {
        return CompletedDataset::new(d.y_raw().to_vec(), d.x_raw().clone());
    }

    let mut rng = rng::stream(seed, "mice", &[model.imputation_index as u64]);
    let mut work = WorkingData {
        x: d.x_raw().clone(),
        y: d.y_raw().to_vec(),
    };
    for record in &model.records {
        let mut pool: Vec<f64> = record.donors.iter().map(|&(_, v)| v).collect();
        pool.sort_by(f64::total_cmp);
        init_variable(d, record.target, &pool, &mut work, &mut rng);
    }
    for record in &model.records {
        for row in missing_rows(d, record.target) {
            let pred = predict(&record.coefficients, &record.predictors, &work, row);
            let v = draw_donor(&record.donors, pred, model.donor_count, &mut rng);
            work.set(row, record.target, v);
        }
    }
    CompletedDataset::new(work.y, work.x)
}

/// Audit dump: one CSV per completed dataset plus a JSON manifest of the
/// fitted models (coefficients, predictor sets, donor pools).
pub fn write_imputation_set(set: &ImputationSet, d: &MissingDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (i, completed) in set.completed.iter().enumerate() {
        let path = dir.join(format!("imputation_{:02}.csv", i + 1));
        write_completed_csv(completed, d.names(), d.response_name(), &path)?;
    }
    let manifest = dir.join("models.json");
    let json = serde_json::to_string_pretty(&set.models)?;
    std::fs::write(&manifest, json).map_err(|e| Error::io(manifest.display().to_string(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn spearman_basic_values() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn spearman_handles_ties_and_degenerate_inputs() {
        // Constant side: defined as zero.
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap(), 0.0);
        // NaN marks a cell unobserved; only pairwise-complete entries count.
        let a = [1.0, f64::NAN, 2.0, 3.0];
        let b = [2.0, 9.0, 4.0, f64::NAN];
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        // Fewer than two common entries is an error.
        assert!(spearman(&[1.0, f64::NAN], &[f64::NAN, 1.0]).is_err());
        // Mid-ranks: (1, 2, 2) vs monotone partner.
        let r = spearman(&[1.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(r > 0.8 && r < 1.0);
    }

    fn dataset_with_noisy_double(n: usize, miss_fraction: f64, seed: u64) -> (MissingDataset, Vec<f64>) {
        let mut rng = rng::stream(seed, "test-impute-data", &[]);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut x = Matrix::zeros(n, 2);
        let mut y = Vec::with_capacity(n);
        let mut mask_x = vec![true; n * 2];
        let mut truth = Vec::new();
        for i in 0..n {
            let x1 = rng.random_range(-3.0..3.0);
            let x2 = 2.0 * x1 + noise.sample(&mut rng);
            x.set(i, 0, x1);
            x.set(i, 1, x2);
            y.push(x1 + noise.sample(&mut rng));
        }
        for i in 0..n {
            if rng.random_range(0.0..1.0) < miss_fraction {
                truth.push((i, x.get(i, 1)));
                mask_x[i * 2 + 1] = false;
            }
        }
        let d = MissingDataset::new(
            y.clone(),
            x,
            vec![true; n],
            mask_x,
            vec!["X1".into(), "X2".into()],
            "y".into(),
        )
        .unwrap();
        let true_vals: Vec<f64> = truth.iter().map(|&(_, v)| v).collect();
        assert!(miss_fraction == 0.0 || !true_vals.is_empty());
        (d, true_vals)
    }

    #[test]
    fn screening_keeps_the_informative_predictor() {
        let (d, _) = dataset_with_noisy_double(100, 0.3, 5);
        // Target X2 (index 1): X1 and y are both near-perfect predictors.
        let kept = screen_predictors(&d, 1, 0.1);
        assert!(kept.contains(&0));
        // Vacuous threshold keeps every other variable.
        assert_eq!(screen_predictors(&d, 1, 0.0), vec![0, 2]);
        // Impossible threshold falls back to the single best.
        assert_eq!(screen_predictors(&d, 1, 1.01).len(), 1);
    }

    #[test]
    fn fully_observed_input_is_copied() {
        let d = MissingDataset::complete(
            vec![1.0, 2.0, 3.0],
            Matrix::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2),
            vec!["X1".into(), "X2".into()],
            "y".into(),
        )
        .unwrap();
        let set = mice_fit(&d, 3, &MiceConfig::default(), 1).unwrap();
        assert_eq!(set.m(), 3);
        for c in &set.completed {
            assert_eq!(c.y, vec![1.0, 2.0, 3.0]);
            assert_eq!(c.x, *d.x_raw());
        }
        assert!(set.models.iter().all(|m| m.records.is_empty()));
    }

    #[test]
    fn near_deterministic_relation_is_recovered() {
        let (d, truth) = dataset_with_noisy_double(200, 0.3, 11);
        let set = mice_fit(&d, 1, &MiceConfig::default(), 42).unwrap();
        let completed = &set.completed[0];
        let mut errs = Vec::new();
        let mut k = 0;
        for i in 0..d.n() {
            if !d.x_observed(i, 1) {
                errs.push((completed.x.get(i, 1) - truth[k]).abs());
                k += 1;
            }
        }
        let mae = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mae < 0.5, "mean absolute imputation error {mae} too large");
    }

    #[test]
    fn imputed_values_come_from_observed_pool() {
        let (d, _) = dataset_with_noisy_double(80, 0.4, 3);
        let set = mice_fit(&d, 2, &MiceConfig::default(), 9).unwrap();
        let observed: Vec<f64> = (0..d.n()).filter(|&i| d.x_observed(i, 1)).map(|i| d.x(i, 1)).collect();
        let lo = observed.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = observed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for c in &set.completed {
            for i in 0..d.n() {
                if !d.x_observed(i, 1) {
                    let v = c.x.get(i, 1);
                    assert!(observed.contains(&v), "imputed value {v} not an observed value");
                    assert!(v >= lo && v <= hi);
                } else {
                    assert_eq!(c.x.get(i, 1), d.x(i, 1), "observed cell changed");
                }
            }
        }
    }

    #[test]
    fn imputations_differ_between_copies() {
        let (d, _) = dataset_with_noisy_double(120, 0.3, 21);
        let set = mice_fit(&d, 4, &MiceConfig::default(), 500).unwrap();
        let mut any_diff = false;
        for m in 1..set.m() {
            for i in 0..d.n() {
                if !d.x_observed(i, 1) && set.completed[m].x.get(i, 1) != set.completed[0].x.get(i, 1) {
                    any_diff = true;
                }
            }
        }
        assert!(any_diff, "all imputations produced identical values");
    }

    #[test]
    fn apply_with_fit_seed_reproduces_single_cycle_completion() {
        let (d, _) = dataset_with_noisy_double(60, 0.35, 7);
        let config = MiceConfig {
            cycles: 1,
            ..MiceConfig::default()
        };
        let seed = 77;
        let set = mice_fit(&d, 2, &config, seed).unwrap();
        for m in 0..2 {
            let redone = mice_apply(&set.models[m], &d, seed).unwrap();
            assert_eq!(redone, set.completed[m]);
        }
    }

    #[test]
    fn apply_to_fully_observed_data_is_identity() {
        let (d, _) = dataset_with_noisy_double(50, 0.3, 13);
        let set = mice_fit(&d, 1, &MiceConfig::default(), 4).unwrap();
        let complete = MissingDataset::complete(
            set.completed[0].y.clone(),
            set.completed[0].x.clone(),
            d.names().to_vec(),
            d.response_name().to_string(),
        )
        .unwrap();
        let out = mice_apply(&set.models[0], &complete, 99).unwrap();
        assert_eq!(out, set.completed[0]);
    }

    #[test]
    fn apply_uses_training_donors_only() {
        let (train, _) = dataset_with_noisy_double(100, 0.3, 31);
        let (mut fresh, _) = dataset_with_noisy_double(40, 0.0, 32);
        // Punch fresh missing cells into the new data.
        let n = fresh.n();
        let mut mask_x = vec![true; n * 2];
        for i in (0..n).step_by(3) {
            mask_x[i * 2 + 1] = false;
        }
        fresh = MissingDataset::new(
            fresh.y_raw().to_vec(),
            fresh.x_raw().clone(),
            vec![true; n],
            mask_x,
            fresh.names().to_vec(),
            fresh.response_name().to_string(),
        )
        .unwrap();
        let set = mice_fit(&train, 1, &MiceConfig::default(), 8).unwrap();
        let out = mice_apply(&set.models[0], &fresh, 123).unwrap();
        let train_observed: Vec<f64> = (0..train.n())
            .filter(|&i| train.x_observed(i, 1))
            .map(|i| train.x(i, 1))
            .collect();
        for i in 0..n {
            if !fresh.x_observed(i, 1) {
                let v = out.x.get(i, 1);
                assert!(
                    train_observed.contains(&v),
                    "imputed value {v} is not a training-observed value"
                );
            }
        }
    }

    #[test]
    fn apply_ignores_masked_validation_responses() {
        // Training data with missing responses too, so the model carries a
        // response record for the validation pass.
        let (base, _) = dataset_with_noisy_double(90, 0.3, 41);
        let n = base.n();
        let mut mask_y = vec![true; n];
        for i in (0..n).step_by(5) {
            mask_y[i] = false;
        }
        let mask_x: Vec<bool> = (0..n)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| base.x_observed(i, j))
            .collect();
        let train = MissingDataset::new(
            base.y_raw().to_vec(),
            base.x_raw().clone(),
            mask_y,
            mask_x,
            base.names().to_vec(),
            base.response_name().to_string(),
        )
        .unwrap();
        let set = mice_fit(&train, 1, &MiceConfig::default(), 15).unwrap();

        let build = |hidden: f64| {
            let n = 30;
            let mut rng = rng::stream(4242, "test-apply-leak", &[]);
            let mut x = Matrix::zeros(n, 2);
            let mut mask_x = vec![true; n * 2];
            let mut y = Vec::new();
            let mut mask_y = Vec::new();
            for i in 0..n {
                let x1 = rng.random_range(-3.0..3.0);
                x.set(i, 0, x1);
                if i % 4 == 0 {
                    x.set(i, 1, 0.0);
                    mask_x[i * 2 + 1] = false;
                } else {
                    x.set(i, 1, 2.0 * x1);
                }
                if i % 5 == 0 {
                    y.push(hidden);
                    mask_y.push(false);
                } else {
                    y.push(x1);
                    mask_y.push(true);
                }
            }
            MissingDataset::new(y, x, mask_y, mask_x, train.names().to_vec(), "y".into()).unwrap()
        };
        let out_a = mice_apply(&set.models[0], &build(0.0), 7).unwrap();
        let out_b = mice_apply(&set.models[0], &build(1e12), 7).unwrap();
        assert_eq!(out_a, out_b);
    }

    #[test]
    fn apply_rejects_wrong_schema() {
        let (train, _) = dataset_with_noisy_double(60, 0.3, 51);
        let set = mice_fit(&train, 1, &MiceConfig::default(), 5).unwrap();
        let other = MissingDataset::complete(
            vec![1.0, 2.0, 3.0],
            Matrix::zeros(3, 1),
            vec!["Z".into()],
            "y".into(),
        )
        .unwrap();
        assert!(matches!(
            mice_apply(&set.models[0], &other, 0),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn precondition_on_observed_counts() {
        // Only one observed X2 value: cannot support donors.
        let d = MissingDataset::new(
            vec![1.0, 2.0, 3.0],
            Matrix::from_vec(vec![1.0, 1.0, 2.0, 0.0, 3.0, 0.0], 3, 2),
            vec![true; 3],
            vec![true, true, true, false, true, false],
            vec!["X1".into(), "X2".into()],
            "y".into(),
        )
        .unwrap();
        assert!(matches!(
            mice_fit(&d, 1, &MiceConfig::default(), 0),
            Err(Error::ImputationPrecondition(_))
        ));
    }

    #[test]
    fn donor_window_prefers_lower_prediction_on_ties() {
        let pool = [(1.0, 10.0), (2.0, 20.0), (3.0, 30.0), (4.0, 40.0)];
        // pred = 2.5 is equidistant from 2.0 and 3.0; k=1 takes the left one.
        assert_eq!(donor_window(&pool, 2.5, 1), (1, 2));
        assert_eq!(donor_window(&pool, 2.5, 2), (1, 3));
        // Window clamps at the edges.
        assert_eq!(donor_window(&pool, -5.0, 2), (0, 2));
        assert_eq!(donor_window(&pool, 99.0, 3), (1, 4));
        assert_eq!(donor_window(&pool, 2.0, 99), (0, 4));
    }

    #[test]
    fn audit_dump_writes_csvs_and_manifest() {
        let (d, _) = dataset_with_noisy_double(40, 0.3, 61);
        let set = mice_fit(&d, 2, &MiceConfig::default(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_imputation_set(&set, &d, dir.path()).unwrap();
        assert!(dir.path().join("imputation_01.csv").exists());
        assert!(dir.path().join("imputation_02.csv").exists());
        let manifest = std::fs::read_to_string(dir.path().join("models.json")).unwrap();
        let parsed: Vec<ImputationModel> = serde_json::from_str(&manifest).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].records.len(), set.models[0].records.len());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn observed_cells_survive_and_imputed_cells_stay_in_range(
                seed in 0u64..200,
                m in 1usize..3,
            ) {
                let (d, _) = dataset_with_noisy_double(50, 0.3, seed);
                let set = mice_fit(&d, m, &MiceConfig::default(), seed ^ 0xabcd).unwrap();
                let observed: Vec<f64> = (0..d.n())
                    .filter(|&i| d.x_observed(i, 1))
                    .map(|i| d.x(i, 1))
                    .collect();
                let lo = observed.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = observed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for c in &set.completed {
                    for i in 0..d.n() {
                        prop_assert_eq!(c.x.get(i, 0), d.x(i, 0));
                        if d.x_observed(i, 1) {
                            prop_assert_eq!(c.x.get(i, 1), d.x(i, 1));
                        } else {
                            prop_assert!(c.x.get(i, 1) >= lo && c.x.get(i, 1) <= hi);
                        }
                    }
                }
            }

            #[test]
            fn fit_is_deterministic_in_the_seed(seed in 0u64..100) {
                let (d, _) = dataset_with_noisy_double(40, 0.3, 77);
                let a = mice_fit(&d, 2, &MiceConfig::default(), seed).unwrap();
                let b = mice_fit(&d, 2, &MiceConfig::default(), seed).unwrap();
                for m in 0..2 {
                    prop_assert_eq!(&a.completed[m], &b.completed[m]);
                }
            }
        }
    }
}
