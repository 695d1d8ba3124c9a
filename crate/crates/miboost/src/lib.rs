//! Variable selection and prediction after multiple imputation.
//!
//! The centerpiece is multiple-imputation gradient boosting: component-wise
//! gradient boosting run in parallel on M imputed copies of a dataset, with
//! the base-learner selection at every iteration coupled through the summed
//! residual sum of squares across copies, so all copies update the same
//! covariate. Around it sit a chained-equations imputer with predictive mean
//! matching ([`imputation`]), a leakage-free cross-validation protocol that
//! imputes validation folds with training-fitted models ([`crossval`]),
//! comparator methods — estimate-averaging boosting and stacked weighted
//! adaptive LASSO / elastic net ([`comparators`]) — and a simulation harness
//! that benchmarks all of them on synthetic data with missing-at-random
//! responses and covariates ([`simulation`]).

pub mod boosting;
pub mod comparators;
pub mod crossval;
pub mod data;
pub mod error;
pub mod imputation;
pub(crate) mod linalg;
pub mod rng;
pub mod simulation;

pub use boosting::{BoostFit, Loss, Offset, SquaredError};
pub use comparators::{
    coord_descent_enet, ea_boost, tune_stacked, tune_stacked_all, EaBoostFit, GridSearchResult,
    PenalizedFit, StackedConfig, StackedDesign, StackedMethod,
};
pub use crossval::{miboost_cv, CvConfig, CvCurve, MiboostCvResult};
pub use data::{CenteringInfo, CompletedDataset, FoldAssignment, Matrix, MissingDataset};
pub use error::{Error, Result};
pub use imputation::{ImputationModel, ImputationSet, MiceConfig};
pub use simulation::{
    evaluate_on_test, generate_complete, generate_round, induce_mar, run_round, run_study,
    AveragedModel, Method, MethodMetrics, RoundResult, SimConfig, StudySummary, TestErrorMode,
    TrueModel,
};
