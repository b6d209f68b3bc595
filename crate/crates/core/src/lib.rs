//! Predicting the difficulty and mean response time of multiple-choice
//! medical-exam questions.
//!
//! The pipeline loads tabular item data, enriches every question with
//! zero-shot answers fetched from LLM inference endpoints, assembles
//! alternative feature combinations from the merged texts, vectorizes them
//! with TF-IDF (optionally PCA-reduced) or precomputed sentence embeddings,
//! and trains nu-Support Vector Regression models under a 5-fold
//! cross-validation harness with hyperparameter grid search.
//!
//! The crate is organized around five stages:
//!
//! * [`dataset`] — loading, validation, label scaling, categorical encoding
//! * [`augment`] — prompt construction, endpoint clients, answer cache
//! * [`features`] — feature-set assembly, TF-IDF, PCA, embedding ingestion
//! * [`svr`] — the nu-SVR dual solver (linear kernel, SMO-style updates)
//! * [`eval`] — metrics, cross-validation, grid search, correlation reports
//!
//! With the default `parallel` feature, grid cells and fold preparation run
//! on a rayon pool; disabling the feature yields a fully sequential build
//! with identical results.

pub mod augment;
pub mod dataset;
pub mod eval;
pub mod features;
pub mod svr;

pub use augment::{augment_dataset, build_prompt, clean_answer, AugmentedItem, LlmEndpointConfig};
pub use dataset::{load_items, Item, ItemSet, LabelKind, LabelScaler, SetRole};
pub use eval::{cross_validate, grid_search, kendall_tau, make_folds, mse, pearson_r, CvPlan, GridSpec, MetricReport};
pub use features::{assemble_text, fit_tfidf, FeatureMatrix, FeatureSetId, TfidfModel};
pub use svr::{train_nu_svr, SvrHyperparams, SvrModel, SvrProblem};
