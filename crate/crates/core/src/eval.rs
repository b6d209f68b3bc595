//! Metrics, cross-validation, grid search, and correlation reports.
//!
//! Folds and grid cells are independent pure computations; with the
//! `parallel` feature they run on the rayon pool, otherwise sequentially.
//! Results are keyed by cell coordinates, so the output is identical in
//! both modes.

use thiserror::Error;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::augment::AugmentedItem;
use crate::dataset::{encode_categoricals, DatasetError, ItemSet, LabelKind, LabelScaler};
use crate::features::{
    assemble_text, fit_pca, fit_tfidf, EmbeddingTable, FeatureError, FeatureMatrix, FeatureSetId,
    TfidfModel,
};
use crate::svr::{SvrError, SvrHyperparams, SvrProblem};

/// The C grid used in the hyperparameter sweeps.
pub const PAPER_C_GRID: [f64; 8] = [0.01, 0.1, 0.5, 1.0, 5.0, 10.0, 50.0, 100.0];
/// The nu grid used in the hyperparameter sweeps.
pub const PAPER_NU_GRID: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,
    #[error("statistic undefined: an input is constant")]
    Undefined,
    #[error("cannot split {n} samples into {k} folds")]
    TooFewSamples { n: usize, k: usize },
    #[error("fold plan covers {plan} items but {items} were given")]
    PlanMismatch { plan: usize, items: usize },
    #[error("item {item_num} lacks the {} label", .label.as_str())]
    MissingLabel { item_num: i64, label: LabelKind },
    #[error("no embedding vector for item {item_num}")]
    MissingEmbedding { item_num: i64 },
    #[error("grid has an empty dimension")]
    EmptyGrid,
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Svr(#[from] SvrError),
}

impl EvalError {
    fn in_fold(self, fold: usize) -> EvalError {
        EvalError::Fold { fold, source: Box::new(self) }
    }
}

/// How fold preparation and grid cells are executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl Default for ExecMode {
    #[cfg(feature = "parallel")]
    fn default() -> Self {
        ExecMode::Parallel
    }

    #[cfg(not(feature = "parallel"))]
    fn default() -> Self {
        ExecMode::Sequential
    }
}

fn map_indexed<U, F>(mode: ExecMode, count: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..count).map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => (0..count).into_par_iter().map(f).collect(),
    }
}

/// Mean squared error `(1/n) sum (y_i - yhat_i)^2`.
pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch { left: y.len(), right: yhat.len() });
    }
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / y.len() as f64)
}

/// Root mean squared error in raw label space: predictions and targets are
/// mapped back through the scaler before squaring.
pub fn rmse_raw(
    y_scaled: &[f64],
    yhat_scaled: &[f64],
    scaler: &LabelScaler,
) -> Result<f64, EvalError> {
    let y: Vec<f64> = y_scaled.iter().map(|&v| scaler.unscale(v)).collect();
    let yhat: Vec<f64> = yhat_scaled.iter().map(|&v| scaler.unscale(v)).collect();
    Ok(mse(&y, &yhat)?.sqrt())
}

/// Kendall tau-b: `(P - Q) / sqrt((P + Q + T)(P + Q + U))` where pairs tied
/// in both lists count in neither tie term.
///
/// Discordant pairs are counted by merge sorting (Knight's method), so the
/// cost is O(n log n). Returns [`EvalError::Undefined`] when either list is
/// constant.
pub fn kendall_tau(y: &[f64], yhat: &[f64]) -> Result<f64, EvalError> {
    if y.len() != yhat.len() {
        return Err(EvalError::LengthMismatch { left: y.len(), right: yhat.len() });
    }
    if y.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = y.len();
    let mut pairs: Vec<(f64, f64)> = y.iter().copied().zip(yhat.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let tie_first = run_pair_count(&pairs, |a, b| a.0 == b.0);
    let tie_both = run_pair_count(&pairs, |a, b| a.0 == b.0 && a.1 == b.1);
    let discordant = merge_count_inversions(&mut pairs);
    // pairs is now sorted by the second coordinate
    let tie_second = run_pair_count(&pairs, |a, b| a.1 == b.1);

    let n0 = (n as i64) * (n as i64 - 1) / 2;
    let d1 = n0 - tie_first as i64;
    let d2 = n0 - tie_second as i64;
    if d1 == 0 || d2 == 0 {
        return Err(EvalError::Undefined);
    }
    let numerator = n0 - tie_first as i64 - tie_second as i64 + tie_both as i64
        - 2 * discordant as i64;
    let tau = numerator as f64 / ((d1 as f64) * (d2 as f64)).sqrt();
    Ok(tau.clamp(-1.0, 1.0))
}

/// Tied pairs within runs of equal keys: sum of len*(len-1)/2 per run.
fn run_pair_count<F>(pairs: &[(f64, f64)], same: F) -> u64
where
    F: Fn(&(f64, f64), &(f64, f64)) -> bool,
{
    let mut total = 0u64;
    let mut run = 1u64;
    for w in pairs.windows(2) {
        if same(&w[0], &w[1]) {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Stable bottom-up merge sort on the second coordinate, counting strict
/// inversions. Input must be sorted by the first coordinate (ties broken by
/// the second); the count then equals the number of discordant pairs.
fn merge_count_inversions(pairs: &mut Vec<(f64, f64)>) -> u64 {
    let n = pairs.len();
    let mut buffer = pairs.clone();
    let mut swaps = 0u64;
    let mut width = 1;
    while width < n {
        let mut start = 0;
        while start < n {
            let mid = (start + width).min(n);
            let end = (start + 2 * width).min(n);
            let (mut i, mut j, mut out) = (start, mid, start);
            while i < mid || j < end {
                if i < mid && (j >= end || pairs[i].1 <= pairs[j].1) {
                    buffer[out] = pairs[i];
                    i += 1;
                } else {
                    swaps += (mid - i) as u64;
                    buffer[out] = pairs[j];
                    j += 1;
                }
                out += 1;
            }
            start = end;
        }
        std::mem::swap(pairs, &mut buffer);
        width *= 2;
    }
    swaps
}

/// Sample Pearson correlation.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < 2 {
        return Err(EvalError::Undefined);
    }
    let n = a.len() as f64;
    let mean_a: f64 = a.iter().sum::<f64>() / n;
    let mean_b: f64 = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - mean_a) * (y - mean_b);
        saa += (x - mean_a) * (x - mean_a);
        sbb += (y - mean_b) * (y - mean_b);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(EvalError::Undefined);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// A fixed assignment of items to validation folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CvPlan {
    pub seed: u64,
    pub n_folds: usize,
    /// Per-item fold index in 0..n_folds.
    pub assignments: Vec<usize>,
}

impl CvPlan {
    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles item indices with a seeded generator and deals them round-robin
/// into k folds, so fold sizes differ by at most one.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<CvPlan, EvalError> {
    if k < 2 || n < k {
        return Err(EvalError::TooFewSamples { n, k });
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut assignments = vec![0; n];
    for (pos, &item) in order.iter().enumerate() {
        assignments[item] = pos % k;
    }
    Ok(CvPlan { seed, n_folds: k, assignments })
}

/// Per-fold metrics with their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Scaled-space MSE, averaged across folds.
    pub mse_mean: f64,
    pub mse_std: f64,
    pub tau_mean: f64,
    pub tau_std: f64,
    /// (mse, tau) per fold, in fold order.
    pub per_fold: Vec<(f64, f64)>,
    /// Raw-label RMSE derived from the scaled mean via the affine identity,
    /// when a scaler was in play.
    pub rmse_raw: Option<f64>,
}

impl MetricReport {
    fn from_folds(per_fold: Vec<(f64, f64)>) -> Self {
        let k = per_fold.len() as f64;
        let mse_mean = per_fold.iter().map(|f| f.0).sum::<f64>() / k;
        let tau_mean = per_fold.iter().map(|f| f.1).sum::<f64>() / k;
        let mse_std =
            (per_fold.iter().map(|f| (f.0 - mse_mean).powi(2)).sum::<f64>() / k).sqrt();
        let tau_std =
            (per_fold.iter().map(|f| (f.1 - tau_mean).powi(2)).sum::<f64>() / k).sqrt();
        MetricReport { mse_mean, mse_std, tau_mean, tau_std, per_fold, rmse_raw: None }
    }
}

/// Which vectorizer backs a run.
#[derive(Debug, Clone, Copy)]
pub enum FeaturizerSpec<'a> {
    Tfidf,
    TfidfPca { k: usize },
    Embeddings(&'a EmbeddingTable),
}

impl FeaturizerSpec<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            FeaturizerSpec::Tfidf => "tfidf",
            FeaturizerSpec::TfidfPca { .. } => "tfidf_pca",
            FeaturizerSpec::Embeddings(_) => "embeddings",
        }
    }
}

/// One fold's featurized training problem and validation split.
struct FoldData {
    problem: SvrProblem,
    val: FeatureMatrix,
    val_y: Vec<f64>,
    /// Fitted TF-IDF model of this fold, kept for leakage diagnostics.
    #[allow(dead_code)]
    tfidf: Option<TfidfModel>,
}

fn scaled_labels(
    aug: &[AugmentedItem],
    label: LabelKind,
) -> Result<(LabelScaler, Vec<f64>), EvalError> {
    let mut raw = Vec::with_capacity(aug.len());
    for a in aug {
        let v = a.item.label(label).ok_or(EvalError::MissingLabel {
            item_num: a.item.item_num,
            label,
        })?;
        raw.push(v);
    }
    let scaler = LabelScaler::fit(&raw, label)?;
    let scaled = raw.iter().map(|&v| scaler.scale(v)).collect();
    Ok((scaler, scaled))
}

/// Fits the featurizer on the non-validation items of every fold and
/// materializes the per-fold training problem. Feature fitting never sees
/// validation items.
fn prepare_folds(
    aug: &[AugmentedItem],
    fs: FeatureSetId,
    featurizer: &FeaturizerSpec<'_>,
    y_scaled: &[f64],
    plan: &CvPlan,
    mode: ExecMode,
) -> Result<Vec<FoldData>, EvalError> {
    if plan.assignments.len() != aug.len() {
        return Err(EvalError::PlanMismatch { plan: plan.assignments.len(), items: aug.len() });
    }
    let texts: Option<Vec<String>> = match featurizer {
        FeaturizerSpec::Tfidf | FeaturizerSpec::TfidfPca { .. } => Some(
            aug.iter()
                .map(|a| assemble_text(a, fs))
                .collect::<Result<_, _>>()?,
        ),
        FeaturizerSpec::Embeddings(_) => None,
    };

    let folds = map_indexed(mode, plan.n_folds, |fold| {
        build_fold(aug, featurizer, y_scaled, plan, texts.as_deref(), fold)
            .map_err(|e| e.in_fold(fold))
    });
    folds.into_iter().collect()
}

fn build_fold(
    aug: &[AugmentedItem],
    featurizer: &FeaturizerSpec<'_>,
    y_scaled: &[f64],
    plan: &CvPlan,
    texts: Option<&[String]>,
    fold: usize,
) -> Result<FoldData, EvalError> {
    let train_idx: Vec<usize> = (0..aug.len()).filter(|&i| plan.assignments[i] != fold).collect();
    let val_idx: Vec<usize> = (0..aug.len()).filter(|&i| plan.assignments[i] == fold).collect();
    let train_y: Vec<f64> = train_idx.iter().map(|&i| y_scaled[i]).collect();
    let val_y: Vec<f64> = val_idx.iter().map(|&i| y_scaled[i]).collect();
    let nums = |idx: &[usize]| -> Vec<i64> { idx.iter().map(|&i| aug[i].item.item_num).collect() };

    let (train, val, tfidf) = match featurizer {
        FeaturizerSpec::Tfidf | FeaturizerSpec::TfidfPca { .. } => {
            let texts = texts.expect("texts assembled for tfidf featurizers");
            let corpus: Vec<String> = train_idx.iter().map(|&i| texts[i].clone()).collect();
            let model = fit_tfidf(&corpus)?;
            let train_texts: Vec<String> = corpus;
            let val_texts: Vec<String> = val_idx.iter().map(|&i| texts[i].clone()).collect();
            let mut train = model.transform_matrix(&nums(&train_idx), &train_texts)?;
            let mut val = model.transform_matrix(&nums(&val_idx), &val_texts)?;
            if let FeaturizerSpec::TfidfPca { k } = featurizer {
                let bound = train.n_rows().saturating_sub(1).min(train.width);
                let k_eff = (*k).min(bound).max(1);
                let pca = fit_pca(&train, k_eff)?;
                train = pca.transform_matrix(&train)?;
                val = pca.transform_matrix(&val)?;
            }
            (train, val, Some(model))
        }
        FeaturizerSpec::Embeddings(table) => {
            let lookup = |idx: &[usize]| -> Result<FeatureMatrix, EvalError> {
                let rows = idx
                    .iter()
                    .map(|&i| {
                        let num = aug[i].item.item_num;
                        table
                            .get(num)
                            .map(<[f64]>::to_vec)
                            .ok_or(EvalError::MissingEmbedding { item_num: num })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(FeatureMatrix::new(nums(idx), rows)?)
            };
            (lookup(&train_idx)?, lookup(&val_idx)?, None)
        }
    };

    let problem = SvrProblem::new(&train, &train_y)?;
    Ok(FoldData { problem, val, val_y, tfidf })
}

/// Trains and scores one hyperparameter setting over prepared folds.
/// Returns the report and the number of folds whose solver hit the
/// iteration cap.
fn evaluate_cell(
    folds: &[FoldData],
    hp: &SvrHyperparams,
) -> Result<(MetricReport, usize), EvalError> {
    let mut per_fold = Vec::with_capacity(folds.len());
    let mut unconverged = 0usize;
    for (f, fold) in folds.iter().enumerate() {
        let model = fold.problem.train(hp).map_err(|e| EvalError::from(e).in_fold(f))?;
        if !model.converged {
            unconverged += 1;
        }
        let preds: Vec<f64> = fold
            .val
            .rows
            .iter()
            .map(|r| model.predict(r))
            .collect::<Result<_, _>>()
            .map_err(|e| EvalError::from(e).in_fold(f))?;
        let fold_mse = mse(&fold.val_y, &preds).map_err(|e| e.in_fold(f))?;
        let fold_tau = kendall_tau(&fold.val_y, &preds).map_err(|e| e.in_fold(f))?;
        per_fold.push((fold_mse, fold_tau));
    }
    Ok((MetricReport::from_folds(per_fold), unconverged))
}

/// Runs k-fold cross-validation of one hyperparameter setting.
///
/// The label scaler is fit once on the full item list before folding;
/// feature fitting is per fold on the training side only. Metrics are
/// computed on scaled labels.
pub fn cross_validate(
    aug: &[AugmentedItem],
    fs: FeatureSetId,
    featurizer: &FeaturizerSpec<'_>,
    hp: &SvrHyperparams,
    plan: &CvPlan,
    label: LabelKind,
) -> Result<MetricReport, EvalError> {
    let (scaler, y_scaled) = scaled_labels(aug, label)?;
    let folds = prepare_folds(aug, fs, featurizer, &y_scaled, plan, ExecMode::default())?;
    let (mut report, _unconverged) = evaluate_cell(&folds, hp)?;
    report.rmse_raw = Some((scaler.max - scaler.min) * report.mse_mean.sqrt());
    Ok(report)
}

/// What the sweep ranks cells by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    TauMean,
    MseMean,
}

/// The hyperparameter grid of a sweep.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub c_values: Vec<f64>,
    pub nu_values: Vec<f64>,
    pub feature_sets: Vec<FeatureSetId>,
    pub selection_metric: SelectionMetric,
}

impl GridSpec {
    /// The full sweep grid: 8 C values times 5 nu values.
    pub fn paper_grid(feature_sets: Vec<FeatureSetId>) -> Self {
        GridSpec {
            c_values: PAPER_C_GRID.to_vec(),
            nu_values: PAPER_NU_GRID.to_vec(),
            feature_sets,
            selection_metric: SelectionMetric::TauMean,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.c_values.len() * self.nu_values.len() * self.feature_sets.len()
    }
}

/// Coordinates of one grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub c: f64,
    pub nu: f64,
    pub feature_set: FeatureSetId,
}

/// Outcome of one cell: a report, or the error that quarantined it.
#[derive(Debug, Clone)]
pub struct GridCellReport {
    pub cell: GridCell,
    pub report: Option<MetricReport>,
    pub unconverged_folds: usize,
    pub error: Option<String>,
}

impl GridCellReport {
    pub fn is_ok(&self) -> bool {
        self.report.is_some()
    }

    pub fn status(&self) -> String {
        match (&self.report, self.unconverged_folds) {
            (Some(_), 0) => "ok".to_string(),
            (Some(_), n) => format!("ok_unconverged({n})"),
            (None, _) => format!("failed: {}", self.error.as_deref().unwrap_or("unknown")),
        }
    }
}

/// Every cell of a sweep plus the index of the winning cell.
#[derive(Debug)]
pub struct GridSearchOutcome {
    pub cells: Vec<GridCellReport>,
    pub best: Option<usize>,
    pub selection_metric: SelectionMetric,
}

impl GridSearchOutcome {
    pub fn best_cell(&self) -> Option<&GridCellReport> {
        self.best.map(|i| &self.cells[i])
    }

    /// Indices of ok cells ranked best-first by the selection metric.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> =
            (0..self.cells.len()).filter(|&i| self.cells[i].is_ok()).collect();
        idx.sort_by(|&a, &b| {
            compare_cells(&self.cells[a], &self.cells[b], self.selection_metric)
        });
        idx
    }
}

/// Orders two ok cells best-first, tie-breaking on lower C, then lower nu,
/// then feature-set table order.
fn compare_cells(
    a: &GridCellReport,
    b: &GridCellReport,
    metric: SelectionMetric,
) -> std::cmp::Ordering {
    let (ma, mb) = match metric {
        SelectionMetric::TauMean => {
            let ra = a.report.as_ref().unwrap().tau_mean;
            let rb = b.report.as_ref().unwrap().tau_mean;
            (-ra, -rb)
        }
        SelectionMetric::MseMean => (
            a.report.as_ref().unwrap().mse_mean,
            b.report.as_ref().unwrap().mse_mean,
        ),
    };
    ma.total_cmp(&mb)
        .then(a.cell.c.total_cmp(&b.cell.c))
        .then(a.cell.nu.total_cmp(&b.cell.nu))
        .then(a.cell.feature_set.rank().cmp(&b.cell.feature_set.rank()))
}

/// Evaluates every (C, nu, feature set) cell with the same fold plan.
///
/// Fold featurization is shared across the (C, nu) cells of a feature set.
/// Failed cells are recorded and excluded from the argmax; they never abort
/// the sweep.
pub fn grid_search(
    aug: &[AugmentedItem],
    grid: &GridSpec,
    featurizer: &FeaturizerSpec<'_>,
    plan: &CvPlan,
    label: LabelKind,
) -> Result<GridSearchOutcome, EvalError> {
    grid_search_with_mode(aug, grid, featurizer, plan, label, ExecMode::default())
}

pub fn grid_search_with_mode(
    aug: &[AugmentedItem],
    grid: &GridSpec,
    featurizer: &FeaturizerSpec<'_>,
    plan: &CvPlan,
    label: LabelKind,
    mode: ExecMode,
) -> Result<GridSearchOutcome, EvalError> {
    if grid.c_values.is_empty() || grid.nu_values.is_empty() || grid.feature_sets.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let (scaler, y_scaled) = scaled_labels(aug, label)?;
    let scale_span = scaler.max - scaler.min;

    let mut cells: Vec<GridCellReport> = Vec::with_capacity(grid.n_cells());
    for &fs in &grid.feature_sets {
        let settings: Vec<(f64, f64)> = grid
            .c_values
            .iter()
            .flat_map(|&c| grid.nu_values.iter().map(move |&nu| (c, nu)))
            .collect();
        match prepare_folds(aug, fs, featurizer, &y_scaled, plan, mode) {
            Ok(folds) => {
                let evaluated = map_indexed(mode, settings.len(), |s| {
                    let (c, nu) = settings[s];
                    let cell = GridCell { c, nu, feature_set: fs };
                    match SvrHyperparams::new(c, nu).map_err(EvalError::from).and_then(|hp| evaluate_cell(&folds, &hp)) {
                        Ok((mut report, unconverged)) => {
                            report.rmse_raw = Some(scale_span * report.mse_mean.sqrt());
                            GridCellReport {
                                cell,
                                report: Some(report),
                                unconverged_folds: unconverged,
                                error: None,
                            }
                        }
                        Err(e) => GridCellReport {
                            cell,
                            report: None,
                            unconverged_folds: 0,
                            error: Some(e.to_string()),
                        },
                    }
                });
                cells.extend(evaluated);
            }
            Err(e) => {
                // featurization failed for this feature set; all its cells
                // are quarantined with the same reason
                let message = e.to_string();
                cells.extend(settings.into_iter().map(|(c, nu)| GridCellReport {
                    cell: GridCell { c, nu, feature_set: fs },
                    report: None,
                    unconverged_folds: 0,
                    error: Some(message.clone()),
                }));
            }
        }
    }

    let best = cells
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_ok())
        .min_by(|(_, a), (_, b)| compare_cells(a, b, grid.selection_metric))
        .map(|(i, _)| i);
    Ok(GridSearchOutcome { cells, best, selection_metric: grid.selection_metric })
}

/// Renders the machine-readable sweep table: one CSV record per cell.
pub fn render_grid_csv(outcome: &GridSearchOutcome) -> String {
    let mut out = String::from("c,nu,feature_set,mse_mean,mse_std,tau_mean,tau_std,status\n");
    for cell in &outcome.cells {
        let (mse_mean, mse_std, tau_mean, tau_std) = match &cell.report {
            Some(r) => (
                format!("{}", r.mse_mean),
                format!("{}", r.mse_std),
                format!("{}", r.tau_mean),
                format!("{}", r.tau_std),
            ),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        let status = csv_escape(&cell.status());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            cell.cell.c, cell.cell.nu, cell.cell.feature_set, mse_mean, mse_std, tau_mean, tau_std, status
        ));
    }
    out
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Renders the human-readable summary: the top cells by the selection
/// metric, best first.
pub fn render_grid_summary(outcome: &GridSearchOutcome, top_n: usize) -> String {
    let metric_name = match outcome.selection_metric {
        SelectionMetric::TauMean => "tau_mean (higher is better)",
        SelectionMetric::MseMean => "mse_mean (lower is better)",
    };
    let ok = outcome.cells.iter().filter(|c| c.is_ok()).count();
    let failed = outcome.cells.len() - ok;
    let mut out = format!(
        "grid sweep: {} cells evaluated ({} ok, {} failed)\nselection metric: {}\n",
        outcome.cells.len(),
        ok,
        failed,
        metric_name
    );
    for (place, idx) in outcome.ranking().into_iter().take(top_n).enumerate() {
        let cell = &outcome.cells[idx];
        let r = cell.report.as_ref().unwrap();
        out.push_str(&format!(
            "{:>2}. feature_set={} C={} nu={}  mse={:.4} +/- {:.4}  tau={:.4} +/- {:.4}\n",
            place + 1,
            cell.cell.feature_set,
            cell.cell.c,
            cell.cell.nu,
            r.mse_mean,
            r.mse_std,
            r.tau_mean,
            r.tau_std
        ));
    }
    out
}

/// Pearson correlation of each encoded categorical feature against each raw
/// label.
#[derive(Debug, Clone)]
pub struct CorrelationEntry {
    pub feature: &'static str,
    pub label: LabelKind,
    pub n: usize,
    /// `None` when the correlation is undefined (constant feature or too
    /// few labeled items).
    pub r: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CorrelationReport {
    pub entries: Vec<CorrelationEntry>,
}

/// Correlates the encoded EXAM, ItemType, and AnswerKey columns with the
/// raw difficulty and response-time labels.
pub fn correlation_report(items: &ItemSet) -> CorrelationReport {
    let mut entries = Vec::with_capacity(6);
    let features: [(&'static str, fn(&crate::dataset::Item) -> i32); 3] = [
        ("exam_code", |it| encode_categoricals(it).exam_code),
        ("item_type_code", |it| encode_categoricals(it).item_type_code),
        ("answer_key_code", |it| encode_categoricals(it).answer_key_code),
    ];
    for (name, encode) in features {
        for label in [LabelKind::Difficulty, LabelKind::ResponseTime] {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for item in &items.items {
                if let Some(y) = item.label(label) {
                    xs.push(encode(item) as f64);
                    ys.push(y);
                }
            }
            let r = pearson_r(&xs, &ys).ok();
            entries.push(CorrelationEntry { feature: name, label, n: xs.len(), r });
        }
    }
    CorrelationReport { entries }
}
