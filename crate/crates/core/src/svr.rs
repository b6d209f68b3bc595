//! nu-Support Vector Regression with a linear kernel.
//!
//! The dual problem
//!
//! ```text
//! maximize  -1/2 sum_ij (a_i - a*_i)(a_j - a*_j) <x_i, x_j> + sum_i y_i (a_i - a*_i)
//! s.t.      sum_i (a_i - a*_i) = 0
//!           sum_i (a_i + a*_i) <= C * nu
//!           0 <= a_i, a*_i <= C / n
//! ```
//!
//! is solved by SMO-style pairwise updates. Both equality sums are pinned at
//! C*nu/2 from a feasible start, and every step moves two variables of the
//! same group (both plain or both starred), which keeps the sums invariant.
//! The pair is the maximally KKT-violating one, updated analytically and
//! clipped to the box. The tube half-width epsilon is not a hyperparameter:
//! it is recovered together with the bias from the KKT conditions after
//! convergence.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;

/// Curvature floor for degenerate (duplicate-row) pair updates.
const CURVATURE_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SvrError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("training needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample count {rows} does not match label count {labels}")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("dimension mismatch: model expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed model file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Regularization and stopping parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrHyperparams {
    pub c: f64,
    pub nu: f64,
    /// Maximal KKT violation accepted at convergence.
    pub tolerance: f64,
    /// Hard iteration cap; `None` means 100 * n^2.
    pub max_iterations: Option<usize>,
}

impl SvrHyperparams {
    pub fn new(c: f64, nu: f64) -> Result<Self, SvrError> {
        let hp = SvrHyperparams { c, nu, tolerance: 1e-6, max_iterations: None };
        hp.validate()?;
        Ok(hp)
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn with_max_iterations(mut self, max_iterations: usize) -> Self {
        self.max_iterations = Some(max_iterations);
        self
    }

    pub fn validate(&self) -> Result<(), SvrError> {
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(SvrError::InvalidHyperparams(format!("C must be positive, got {}", self.c)));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(SvrError::InvalidHyperparams(format!("nu must lie in (0, 1], got {}", self.nu)));
        }
        if !(self.tolerance > 0.0) {
            return Err(SvrError::InvalidHyperparams("tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// A trained regressor.
#[derive(Debug, Clone)]
pub struct SvrModel {
    /// Per-sample dual pair (a_i, a*_i) with a_i * a*_i = 0. Empty on
    /// models loaded from disk; prediction needs only weight and bias.
    pub alphas: Vec<(f64, f64)>,
    pub bias: f64,
    /// Tube half-width recovered from the KKT conditions, >= 0.
    pub epsilon: f64,
    /// Materialized linear-kernel weight vector, sum_i (a_i - a*_i) x_i.
    pub weight: Vec<f64>,
    pub hyperparams: SvrHyperparams,
    pub n_train: usize,
    /// False when the iteration cap was reached before the KKT violation
    /// dropped below tolerance. The model is still usable.
    pub converged: bool,
    /// Final maximal KKT violation.
    pub kkt_violation: f64,
    /// Pair updates performed.
    pub iterations: usize,
}

impl SvrModel {
    /// Linear prediction `<w, x> + b`. Output is not clamped.
    pub fn predict(&self, x: &[f64]) -> Result<f64, SvrError> {
        if x.len() != self.weight.len() {
            return Err(SvrError::DimensionMismatch {
                expected: self.weight.len(),
                got: x.len(),
            });
        }
        Ok(self.weight.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }

    pub fn save(&self, path: &Path) -> Result<(), SvrError> {
        let file = SvrModelFile {
            format_version: MODEL_FORMAT_VERSION,
            c: self.hyperparams.c,
            nu: self.hyperparams.nu,
            tolerance: self.hyperparams.tolerance,
            max_iterations: self.hyperparams.max_iterations,
            weight: self.weight.clone(),
            bias: self.bias,
            epsilon: self.epsilon,
            n_train: self.n_train,
            converged: self.converged,
            kkt_violation: self.kkt_violation,
        };
        let mut out = serde_json::to_string_pretty(&file)?;
        out.push('\n');
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SvrError> {
        let raw = std::fs::read_to_string(path)?;
        let file: SvrModelFile = serde_json::from_str(&raw)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(SvrError::UnsupportedVersion(file.format_version));
        }
        Ok(SvrModel {
            alphas: Vec::new(),
            bias: file.bias,
            epsilon: file.epsilon,
            weight: file.weight,
            hyperparams: SvrHyperparams {
                c: file.c,
                nu: file.nu,
                tolerance: file.tolerance,
                max_iterations: file.max_iterations,
            },
            n_train: file.n_train,
            converged: file.converged,
            kkt_violation: file.kkt_violation,
            iterations: 0,
        })
    }
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SvrModelFile {
    format_version: u32,
    c: f64,
    nu: f64,
    tolerance: f64,
    max_iterations: Option<usize>,
    weight: Vec<f64>,
    bias: f64,
    epsilon: f64,
    n_train: usize,
    converged: bool,
    kkt_violation: f64,
}

/// A training problem with its precomputed Gram matrix, reusable across
/// hyperparameter settings.
pub struct SvrProblem {
    x: FeatureMatrix,
    y: Vec<f64>,
    gram: Vec<f64>,
}

impl SvrProblem {
    pub fn new(x: &FeatureMatrix, y: &[f64]) -> Result<Self, SvrError> {
        let n = x.n_rows();
        if y.len() != n {
            return Err(SvrError::LengthMismatch { rows: n, labels: y.len() });
        }
        if n < 2 {
            return Err(SvrError::TooFewSamples(n));
        }
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let dot: f64 = x.rows[i].iter().zip(&x.rows[j]).map(|(a, b)| a * b).sum();
                gram[i * n + j] = dot;
                gram[j * n + i] = dot;
            }
        }
        Ok(SvrProblem { x: x.clone(), y: y.to_vec(), gram })
    }

    pub fn n_samples(&self) -> usize {
        self.y.len()
    }

    /// Trains one model for the given hyperparameters.
    pub fn train(&self, hp: &SvrHyperparams) -> Result<SvrModel, SvrError> {
        Ok(self.run_smo(hp, None)?)
    }

    /// Like [`train`](Self::train) but also records the exact dual
    /// objective after every pair update, for convergence diagnostics.
    pub fn train_traced(&self, hp: &SvrHyperparams) -> Result<(SvrModel, Vec<f64>), SvrError> {
        let mut trace = Vec::new();
        let model = self.run_smo(hp, Some(&mut trace))?;
        Ok((model, trace))
    }

    fn q(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.y.len() + j]
    }

    /// Dual objective -1/2 b'Qb + y'b for the split alphas.
    fn dual_objective(&self, a: &[f64], astar: &[f64]) -> f64 {
        let n = self.y.len();
        let beta: Vec<f64> = (0..n).map(|i| a[i] - astar[i]).collect();
        let mut quad = 0.0;
        for i in 0..n {
            if beta[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                quad += beta[i] * beta[j] * self.q(i, j);
            }
        }
        let linear: f64 = beta.iter().zip(&self.y).map(|(b, y)| b * y).sum();
        -0.5 * quad + linear
    }

    fn run_smo(&self, hp: &SvrHyperparams, mut trace: Option<&mut Vec<f64>>) -> Result<SvrModel, SvrError> {
        hp.validate()?;
        let n = self.y.len();
        let cap = hp.c / n as f64;
        let max_iterations = hp.max_iterations.unwrap_or(100 * n * n);

        // Feasible start: both group sums equal C*nu/2 and beta = 0.
        let mut a = vec![0.0; n];
        let mut astar = vec![0.0; n];
        let mut remaining = hp.c * hp.nu / 2.0;
        for i in 0..n {
            if remaining <= 0.0 {
                break;
            }
            let take = remaining.min(cap);
            a[i] = take;
            astar[i] = take;
            remaining -= take;
        }

        // grad[i] = y_i - (Q beta)_i; beta starts at zero.
        let mut grad = self.y.clone();
        let mut iterations = 0usize;
        let mut violation;
        let converged;
        loop {
            // Most violating pair inside each group. Scanning in index
            // order with strict comparisons breaks ties by lowest index.
            let mut pos_up: Option<(f64, usize)> = None;
            let mut pos_down: Option<(f64, usize)> = None;
            let mut neg_up: Option<(f64, usize)> = None;
            let mut neg_down: Option<(f64, usize)> = None;
            for i in 0..n {
                let g = grad[i];
                if a[i] < cap && pos_up.map_or(true, |(best, _)| g > best) {
                    pos_up = Some((g, i));
                }
                if a[i] > 0.0 && pos_down.map_or(true, |(best, _)| g < best) {
                    pos_down = Some((g, i));
                }
                if astar[i] < cap && neg_up.map_or(true, |(best, _)| -g > best) {
                    neg_up = Some((-g, i));
                }
                if astar[i] > 0.0 && neg_down.map_or(true, |(best, _)| -g < best) {
                    neg_down = Some((-g, i));
                }
            }
            let v_pos = match (pos_up, pos_down) {
                (Some((up, _)), Some((down, _))) => up - down,
                _ => f64::NEG_INFINITY,
            };
            let v_neg = match (neg_up, neg_down) {
                (Some((up, _)), Some((down, _))) => up - down,
                _ => f64::NEG_INFINITY,
            };
            violation = v_pos.max(v_neg);
            if violation <= hp.tolerance {
                converged = true;
                break;
            }
            if iterations >= max_iterations {
                converged = false;
                break;
            }

            if v_pos >= v_neg {
                let (gi, i) = pos_up.unwrap();
                let (gj, j) = pos_down.unwrap();
                let curv = (self.q(i, i) + self.q(j, j) - 2.0 * self.q(i, j)).max(CURVATURE_FLOOR);
                let room_up = cap - a[i];
                let room_down = a[j];
                let step = ((gi - gj) / curv).min(room_up).min(room_down);
                a[i] += step;
                a[j] -= step;
                if step == room_up {
                    a[i] = cap;
                }
                if step == room_down {
                    a[j] = 0.0;
                }
                for k in 0..n {
                    grad[k] -= step * (self.q(k, i) - self.q(k, j));
                }
            } else {
                let (ngi, i) = neg_up.unwrap();
                let (ngj, j) = neg_down.unwrap();
                let curv = (self.q(i, i) + self.q(j, j) - 2.0 * self.q(i, j)).max(CURVATURE_FLOOR);
                let room_up = cap - astar[i];
                let room_down = astar[j];
                let step = ((ngi - ngj) / curv).min(room_up).min(room_down);
                astar[i] += step;
                astar[j] -= step;
                if step == room_up {
                    astar[i] = cap;
                }
                if step == room_down {
                    astar[j] = 0.0;
                }
                for k in 0..n {
                    grad[k] += step * (self.q(k, i) - self.q(k, j));
                }
            }
            iterations += 1;
            if let Some(trace) = trace.as_deref_mut() {
                trace.push(self.dual_objective(&a, &astar));
            }
        }

        // Bias and epsilon from the KKT conditions, free variables first.
        // For the plain group G_i = b + eps on free a_i; for the starred
        // group G_i = b - eps on free a*_i.
        let r1 = recover_multiplier(&a, &grad, cap, false);
        let r2 = recover_multiplier(&astar, &grad, cap, true);
        let bias = 0.5 * (r1 + r2);
        let epsilon = (0.5 * (r1 - r2)).max(0.0);

        // The objective depends only on beta = a - a*, so overlapping mass
        // can be removed without changing the solution. This restores the
        // per-sample complementarity a_i * a*_i = 0.
        for i in 0..n {
            let m = a[i].min(astar[i]);
            if m > 0.0 {
                a[i] -= m;
                astar[i] -= m;
                if a[i] < astar[i] {
                    a[i] = 0.0;
                } else {
                    astar[i] = 0.0;
                }
            }
        }

        let d = self.x.width;
        let mut weight = vec![0.0; d];
        for i in 0..n {
            let beta = a[i] - astar[i];
            if beta != 0.0 {
                for (w, v) in weight.iter_mut().zip(&self.x.rows[i]) {
                    *w += beta * v;
                }
            }
        }

        Ok(SvrModel {
            alphas: a.into_iter().zip(astar).collect(),
            bias,
            epsilon,
            weight,
            hyperparams: *hp,
            n_train: n,
            converged,
            kkt_violation: violation,
            iterations,
        })
    }
}

/// KKT multiplier for one group: the mean gradient over free variables, or
/// the midpoint of the feasible interval when no variable is free.
///
/// `starred` selects the direction conventions of the a* group.
fn recover_multiplier(alpha: &[f64], grad: &[f64], cap: f64, starred: bool) -> f64 {
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    let mut lower: Option<f64> = None;
    let mut upper: Option<f64> = None;
    for (i, &v) in alpha.iter().enumerate() {
        let g = grad[i];
        if v > 0.0 && v < cap {
            free_sum += g;
            free_count += 1;
        } else if (v == 0.0) != starred {
            // a_i = 0 gives G_i <= r1; a*_i = cap gives G_i <= r2.
            lower = Some(lower.map_or(g, |l: f64| l.max(g)));
        } else {
            // a_i = cap gives G_i >= r1; a*_i = 0 gives G_i >= r2.
            upper = Some(upper.map_or(g, |u: f64| u.min(g)));
        }
    }
    if free_count > 0 {
        return free_sum / free_count as f64;
    }
    match (lower, upper) {
        (Some(l), Some(u)) => 0.5 * (l + u),
        (Some(l), None) => l,
        (None, Some(u)) => u,
        (None, None) => 0.0,
    }
}

/// Trains a nu-SVR model on scaled targets.
pub fn train_nu_svr(
    x: &FeatureMatrix,
    y: &[f64],
    hp: &SvrHyperparams,
) -> Result<SvrModel, SvrError> {
    SvrProblem::new(x, y)?.train(hp)
}
