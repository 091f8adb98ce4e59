//! Representational-bottleneck measurements: PCA spectrum metrics
//! (dim90/dim95, participation ratio), logistic-regression linear probes,
//! and top-k vs tail-half projection tests.
//!
//! All operations are pure functions of immutable inputs and can run in
//! parallel across findings. Train/eval splitting is the caller's job;
//! nothing here splits internally.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{mean_center, EmbeddingMatrix};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("need at least {needed} rows, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("variance fractions must sum to 1 (got {0})")]
    BadFractions(f64),
    #[error("threshold must lie in (0,1), got {0}")]
    BadThreshold(f64),
    #[error("all singular values are zero")]
    DegenerateSpectrum,
    #[error("labels contain a single class; need both positives and negatives")]
    SingleClass,
    #[error("labels length {labels} does not match row count {rows}")]
    LabelMismatch { labels: usize, rows: usize },
    #[error("dimension mismatch between train ({train}) and eval ({eval})")]
    SplitDimMismatch { train: usize, eval: usize },
    #[error("projection needs d >= 2k (d = {d}, k = {k})")]
    ProjectionTooWide { d: usize, k: usize },
}

/// Singular-value spectrum of one embedding space plus its derived
/// effective-dimensionality metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Descending singular values of the mean-centered data matrix.
    pub singular_values: Vec<f64>,
    /// sigma_i^2 / sum_j sigma_j^2, aligned with `singular_values`.
    pub variance_fractions: Vec<f64>,
    pub dim90: usize,
    pub dim95: usize,
    pub participation_ratio: f64,
}

/// Probe hyperparameters. `l2_strength` is the inverse-C penalty weight;
/// the default matches C = 1.0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2_strength: f64,
    pub max_iterations: usize,
    pub class_balanced: bool,
    /// Convergence tolerance on the gradient norm.
    pub convergence_tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2_strength: 1.0,
            max_iterations: 1000,
            class_balanced: true,
            convergence_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub finding: String,
    pub auc: f64,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionTestResult {
    pub k: usize,
    pub top_k_auc: f64,
    pub tail_auc: f64,
    /// tail_auc - top_k_auc; positive means discriminative signal lives in
    /// the low-variance directions that cosine similarity ignores.
    pub delta: f64,
}

/// Full SVD spectrum of the mean-centered matrix with derived metrics.
///
/// The 1/(n-1) covariance factor cancels in every reported metric, so the
/// singular values are kept unscaled.
pub fn pca_spectrum(m: &EmbeddingMatrix) -> Result<SpectrumReport, DiagnosticsError> {
    if m.n_rows() < 2 {
        return Err(DiagnosticsError::InsufficientData {
            needed: 2,
            got: m.n_rows(),
        });
    }
    let (centered, _) = mean_center(m).expect("n >= 2 checked above");
    let mat = DMatrix::from_row_slice(centered.n_rows(), centered.dim(), centered.data());
    let singular_values: Vec<f64> = mat.singular_values().iter().copied().collect();
    spectrum_from_singular_values(singular_values)
}

/// Derive a [`SpectrumReport`] from already-computed singular values
/// (descending or not; they are sorted here).
pub fn spectrum_from_singular_values(
    mut singular_values: Vec<f64>,
) -> Result<SpectrumReport, DiagnosticsError> {
    if singular_values.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    singular_values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return Err(DiagnosticsError::DegenerateSpectrum);
    }
    let variance_fractions: Vec<f64> = singular_values.iter().map(|s| s * s / total).collect();
    let dim90 = effective_dims(&variance_fractions, 0.90)?;
    let dim95 = effective_dims(&variance_fractions, 0.95)?;
    let participation_ratio = participation_ratio(&singular_values)?;
    Ok(SpectrumReport {
        singular_values,
        variance_fractions,
        dim90,
        dim95,
        participation_ratio,
    })
}

/// Smallest k such that the cumulative variance fraction reaches
/// `threshold`. Fractions must be descending and sum to 1 within 1e-6.
pub fn effective_dims(
    variance_fractions: &[f64],
    threshold: f64,
) -> Result<usize, DiagnosticsError> {
    if variance_fractions.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(DiagnosticsError::BadThreshold(threshold));
    }
    let sum: f64 = variance_fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(DiagnosticsError::BadFractions(sum));
    }
    let mut cum = 0.0;
    for (i, f) in variance_fractions.iter().enumerate() {
        cum += f;
        // Summation error must not push an exact boundary (e.g. nine
        // tenths of uniform variance vs 0.90) past the threshold.
        if cum >= threshold - 1e-12 {
            return Ok(i + 1);
        }
    }
    Ok(variance_fractions.len())
}

/// Participation ratio (sum sigma^2)^2 / sum sigma^4. Equals the ambient
/// dimension when all variances are equal and 1 under complete collapse.
pub fn participation_ratio(singular_values: &[f64]) -> Result<f64, DiagnosticsError> {
    if singular_values.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    let s2: f64 = singular_values.iter().map(|s| s * s).sum();
    let s4: f64 = singular_values.iter().map(|s| s * s * s * s).sum();
    if s4 <= 0.0 {
        return Err(DiagnosticsError::DegenerateSpectrum);
    }
    Ok(s2 * s2 / s4)
}

/// Mann-Whitney AUC-ROC with midrank tie handling: the probability that a
/// random positive outscores a random negative, ties counted 0.5.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64, DiagnosticsError> {
    if scores.len() != labels.len() {
        return Err(DiagnosticsError::LabelMismatch {
            labels: labels.len(),
            rows: scores.len(),
        });
    }
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DiagnosticsError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(l, _)| **l)
        .map(|(_, r)| r)
        .sum();
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Train an L2-regularized logistic-regression probe on the train split
/// and report AUC on the caller-supplied eval split.
///
/// The optimizer is a deterministic full-batch L-BFGS with backtracking
/// line search; non-convergence within the iteration cap still returns a
/// result, with `converged` set to false.
pub fn train_linear_probe(
    train: &EmbeddingMatrix,
    train_labels: &[bool],
    eval: &EmbeddingMatrix,
    eval_labels: &[bool],
    finding: &str,
    cfg: &ProbeConfig,
) -> Result<ProbeResult, DiagnosticsError> {
    if train_labels.len() != train.n_rows() {
        return Err(DiagnosticsError::LabelMismatch {
            labels: train_labels.len(),
            rows: train.n_rows(),
        });
    }
    if eval_labels.len() != eval.n_rows() {
        return Err(DiagnosticsError::LabelMismatch {
            labels: eval_labels.len(),
            rows: eval.n_rows(),
        });
    }
    if train.dim() != eval.dim() {
        return Err(DiagnosticsError::SplitDimMismatch {
            train: train.dim(),
            eval: eval.dim(),
        });
    }
    let n = train.n_rows();
    let n_pos = train_labels.iter().filter(|&&l| l).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DiagnosticsError::SingleClass);
    }

    // Balanced heuristic: weight for class c is n / (2 * n_c).
    let (w_pos, w_neg) = if cfg.class_balanced {
        (n as f64 / (2.0 * n_pos as f64), n as f64 / (2.0 * n_neg as f64))
    } else {
        (1.0, 1.0)
    };
    let sample_weights: Vec<f64> = train_labels
        .iter()
        .map(|&l| if l { w_pos } else { w_neg })
        .collect();

    let fit = lbfgs_logistic(
        train,
        train_labels,
        &sample_weights,
        cfg.l2_strength,
        cfg.max_iterations,
        cfg.convergence_tol,
    );

    let scores: Vec<f64> = (0..eval.n_rows())
        .map(|i| crate::embed::dot(eval.row(i), &fit.weights) + fit.bias)
        .collect();
    let auc = auc_roc(&scores, eval_labels)?;

    Ok(ProbeResult {
        finding: finding.to_string(),
        auc,
        weights: fit.weights,
        bias: fit.bias,
        converged: fit.converged,
    })
}

/// Train probes on the top-k highest-variance principal components and on
/// the lower half of all PCs, reporting both AUCs and their gap.
///
/// The PCA basis comes from the train split; both splits are centered by
/// the train mean before projection.
pub fn projection_test(
    train: &EmbeddingMatrix,
    train_labels: &[bool],
    eval: &EmbeddingMatrix,
    eval_labels: &[bool],
    k: usize,
    cfg: &ProbeConfig,
) -> Result<ProjectionTestResult, DiagnosticsError> {
    if k == 0 {
        return Err(DiagnosticsError::EmptyInput);
    }
    let d = train.dim();
    if d < 2 * k {
        return Err(DiagnosticsError::ProjectionTooWide { d, k });
    }
    if train.n_rows() < 2 {
        return Err(DiagnosticsError::InsufficientData {
            needed: 2,
            got: train.n_rows(),
        });
    }
    if train.dim() != eval.dim() {
        return Err(DiagnosticsError::SplitDimMismatch {
            train: train.dim(),
            eval: eval.dim(),
        });
    }

    let (centered, mean) = mean_center(train).expect("n >= 2 checked above");
    let mat = DMatrix::from_row_slice(centered.n_rows(), centered.dim(), centered.data());
    let svd = mat.svd(false, true);
    let v_t = svd.v_t.expect("v requested");
    let n_pcs = v_t.nrows();
    if k > n_pcs {
        return Err(DiagnosticsError::ProjectionTooWide { d: n_pcs, k });
    }

    // nalgebra orders singular values descending, so row i of V^T is the
    // i-th highest-variance principal component.
    let tail_count = (n_pcs / 2).max(1);
    let top_rows: Vec<usize> = (0..k).collect();
    let tail_rows: Vec<usize> = (n_pcs - tail_count..n_pcs).collect();

    let project = |m: &EmbeddingMatrix, rows: &[usize]| -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(m.n_rows() * rows.len());
        for i in 0..m.n_rows() {
            let x = m.row(i);
            for &r in rows {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += (x[j] - mean[j]) * v_t[(r, j)];
                }
                data.push(acc);
            }
        }
        EmbeddingMatrix::new(m.ids().to_vec(), rows.len(), data)
            .expect("projection preserves shape and finiteness")
    };

    let top_train = project(train, &top_rows);
    let top_eval = project(eval, &top_rows);
    let tail_train = project(train, &tail_rows);
    let tail_eval = project(eval, &tail_rows);

    let top = train_linear_probe(&top_train, train_labels, &top_eval, eval_labels, "top", cfg)?;
    let tail = train_linear_probe(
        &tail_train,
        train_labels,
        &tail_eval,
        eval_labels,
        "tail",
        cfg,
    )?;

    Ok(ProjectionTestResult {
        k,
        top_k_auc: top.auc,
        tail_auc: tail.auc,
        delta: tail.auc - top.auc,
    })
}

struct LogisticFit {
    weights: Vec<f64>,
    bias: f64,
    converged: bool,
}

/// Objective: sum_i s_i * logloss_i + 0.5 * l2 * ||w||^2 (bias unpenalized).
fn logistic_value(x: &EmbeddingMatrix, y: &[bool], s: &[f64], l2: f64, theta: &[f64]) -> f64 {
    let d = x.dim();
    let (w, b) = (&theta[..d], theta[d]);
    let mut value = 0.0;
    for i in 0..x.n_rows() {
        let z = crate::embed::dot(x.row(i), w) + b;
        let yi = if y[i] { 1.0 } else { 0.0 };
        // log(1 + e^z) - y*z, evaluated stably.
        value += s[i] * (z.max(0.0) - yi * z + (-z.abs()).exp().ln_1p());
    }
    for wj in w {
        value += 0.5 * l2 * wj * wj;
    }
    value
}

fn logistic_grad(x: &EmbeddingMatrix, y: &[bool], s: &[f64], l2: f64, theta: &[f64]) -> Vec<f64> {
    let d = x.dim();
    let (w, b) = (&theta[..d], theta[d]);
    let mut grad = vec![0.0; d + 1];
    for i in 0..x.n_rows() {
        let xi = x.row(i);
        let z = crate::embed::dot(xi, w) + b;
        let yi = if y[i] { 1.0 } else { 0.0 };
        let p = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        let g = s[i] * (p - yi);
        for j in 0..d {
            grad[j] += g * xi[j];
        }
        grad[d] += g;
    }
    for j in 0..d {
        grad[j] += l2 * w[j];
    }
    grad
}

/// Deterministic full-batch L-BFGS (history 10) with Armijo backtracking.
/// Stops on the gradient-norm tolerance, the iteration cap, or objective
/// stagnation at f64 resolution; strict tolerances near machine epsilon
/// report `converged = false` rather than spinning out the cap.
fn lbfgs_logistic(
    x: &EmbeddingMatrix,
    y: &[bool],
    s: &[f64],
    l2: f64,
    max_iter: usize,
    tol: f64,
) -> LogisticFit {
    const HISTORY: usize = 10;
    let d = x.dim();
    let mut theta = vec![0.0; d + 1];
    let mut value = logistic_value(x, y, s, l2, &theta);
    let mut grad = logistic_grad(x, y, s, l2, &theta);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut stagnant = 0usize;

    for _ in 0..max_iter {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= tol {
            converged = true;
            break;
        }

        // Two-loop recursion.
        let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = vec![0.0; s_hist.len()];
        for h in (0..s_hist.len()).rev() {
            let alpha = rho_hist[h] * dotv(&s_hist[h], &dir);
            alphas[h] = alpha;
            for j in 0..dir.len() {
                dir[j] -= alpha * y_hist[h][j];
            }
        }
        if let (Some(s_last), Some(y_last)) = (s_hist.last(), y_hist.last()) {
            let gamma = dotv(s_last, y_last) / dotv(y_last, y_last);
            for v in &mut dir {
                *v *= gamma;
            }
        }
        for h in 0..s_hist.len() {
            let beta = rho_hist[h] * dotv(&y_hist[h], &dir);
            for j in 0..dir.len() {
                dir[j] += (alphas[h] - beta) * s_hist[h][j];
            }
        }

        let slope = dotv(&grad, &dir);
        let (dir, slope) = if slope < 0.0 {
            (dir, slope)
        } else {
            // Fall back to steepest descent if curvature info went stale.
            let fallback: Vec<f64> = grad.iter().map(|g| -g).collect();
            let slope = -grad.iter().map(|g| g * g).sum::<f64>();
            (fallback, slope)
        };

        // Backtracking Armijo line search on values only; the gradient is
        // computed once at the accepted point.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let cand: Vec<f64> = theta
                .iter()
                .zip(&dir)
                .map(|(t, dv)| t + step * dv)
                .collect();
            let cand_value = logistic_value(x, y, s, l2, &cand);
            if cand_value <= value + 1e-4 * step * slope {
                accepted = Some((cand, cand_value));
                break;
            }
            step *= 0.5;
        }
        let Some((new_theta, new_value)) = accepted else {
            break; // no descent representable at this scale
        };
        if (value - new_value).abs() <= 4.0 * f64::EPSILON * value.abs() {
            stagnant += 1;
            if stagnant >= 3 {
                break;
            }
        } else {
            stagnant = 0;
        }
        let new_grad = logistic_grad(x, y, s, l2, &new_theta);

        let s_vec: Vec<f64> = new_theta.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y_vec: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dotv(&s_vec, &y_vec);
        if sy > 1e-12 {
            if s_hist.len() == HISTORY {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            rho_hist.push(1.0 / sy);
            s_hist.push(s_vec);
            y_hist.push(y_vec);
        }
        theta = new_theta;
        value = new_value;
        grad = new_grad;
    }

    if !converged {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        converged = gnorm <= tol;
    }
    let bias = theta[d];
    theta.truncate(d);
    LogisticFit {
        weights: theta,
        bias,
        converged,
    }
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gen_probe_split;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(dim: usize, data: Vec<f64>) -> EmbeddingMatrix {
        let n = data.len() / dim;
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        EmbeddingMatrix::new(ids, dim, data).unwrap()
    }

    #[test]
    fn effective_dims_examples() {
        assert_eq!(effective_dims(&[0.85, 0.10, 0.05], 0.90).unwrap(), 2);
        let uniform = vec![0.1; 10];
        assert_eq!(effective_dims(&uniform, 0.90).unwrap(), 9);
        assert_eq!(effective_dims(&[1.0], 0.95).unwrap(), 1);
    }

    #[test]
    fn effective_dims_rejects_bad_input() {
        assert!(matches!(
            effective_dims(&[], 0.9),
            Err(DiagnosticsError::EmptyInput)
        ));
        assert!(matches!(
            effective_dims(&[0.5, 0.1], 0.9),
            Err(DiagnosticsError::BadFractions(_))
        ));
        assert!(matches!(
            effective_dims(&[1.0], 1.5),
            Err(DiagnosticsError::BadThreshold(_))
        ));
    }

    #[test]
    fn participation_ratio_boundary_laws() {
        assert!((participation_ratio(&[1.0, 1.0, 1.0, 1.0]).unwrap() - 4.0).abs() < 1e-12);
        assert!((participation_ratio(&[1.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((participation_ratio(&[2.0, 1.0]).unwrap() - 25.0 / 17.0).abs() < 1e-12);
        assert!(matches!(
            participation_ratio(&[0.0, 0.0]),
            Err(DiagnosticsError::DegenerateSpectrum)
        ));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            auc_roc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(),
            1.0
        );
        assert_eq!(
            auc_roc(&[0.5, 0.5, 0.5, 0.5], &[true, true, false, false]).unwrap(),
            0.5
        );
        assert_eq!(
            auc_roc(&[0.8, 0.3, 0.5, 0.1], &[true, true, false, false]).unwrap(),
            0.75
        );
        assert!(matches!(
            auc_roc(&[0.1, 0.2], &[true, true]),
            Err(DiagnosticsError::SingleClass)
        ));
    }

    #[test]
    fn spectrum_of_points_on_a_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dir = [1.0, -2.0, 0.5];
        let mut data = Vec::new();
        for _ in 0..100 {
            let t: f64 = rng.gen_range(-3.0..3.0);
            data.extend(dir.iter().map(|d| d * t));
        }
        let report = pca_spectrum(&matrix(3, data)).unwrap();
        assert!(report.variance_fractions[0] > 1.0 - 1e-9);
        assert_eq!(report.dim90, 1);
        assert_eq!(report.dim95, 1);
        assert!((report.participation_ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn spectrum_matches_known_axis_variances() {
        // Two orthogonal axes with 4:1 variance ratio.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut data = Vec::new();
        for _ in 0..4000 {
            let a: f64 = rng.sample::<f64, _>(rand::distributions::Standard) - 0.5;
            let b: f64 = rng.sample::<f64, _>(rand::distributions::Standard) - 0.5;
            data.push(2.0 * a);
            data.push(b);
        }
        let report = pca_spectrum(&matrix(2, data)).unwrap();
        assert!((report.variance_fractions[0] - 0.8).abs() < 0.02);
        assert!((report.variance_fractions[1] - 0.2).abs() < 0.02);
    }

    #[test]
    fn spectrum_needs_two_rows() {
        assert!(matches!(
            pca_spectrum(&matrix(2, vec![1.0, 2.0])),
            Err(DiagnosticsError::InsufficientData { .. })
        ));
    }

    #[test]
    fn probe_separates_wide_margin_clusters() {
        let (train, train_y, eval, eval_y) = gen_probe_split(3, 200, 4, 4.0);
        let r = train_linear_probe(&train, &train_y, &eval, &eval_y, "sep", &ProbeConfig::default())
            .unwrap();
        assert!(r.auc >= 0.99, "auc = {}", r.auc);
    }

    #[test]
    fn probe_on_permuted_labels_is_chance_level() {
        // The permutation null breaks the feature-label association in
        // both splits; any probe then scores near 0.5.
        let (train, mut train_y, eval, mut eval_y) = gen_probe_split(7, 200, 4, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        train_y.shuffle(&mut rng);
        eval_y.shuffle(&mut rng);
        let r = train_linear_probe(&train, &train_y, &eval, &eval_y, "null", &ProbeConfig::default())
            .unwrap();
        assert!((r.auc - 0.5).abs() < 0.1, "auc = {}", r.auc);
    }

    #[test]
    fn probe_rejects_single_class() {
        let (train, _, eval, eval_y) = gen_probe_split(1, 10, 3, 2.0);
        let all_true = vec![true; train.n_rows()];
        assert!(matches!(
            train_linear_probe(&train, &all_true, &eval, &eval_y, "x", &ProbeConfig::default()),
            Err(DiagnosticsError::SingleClass)
        ));
    }

    #[test]
    fn probe_ranking_survives_feature_rescaling() {
        let (train, train_y, eval, eval_y) = gen_probe_split(13, 150, 4, 3.0);
        let base = train_linear_probe(
            &train,
            &train_y,
            &eval,
            &eval_y,
            "base",
            &ProbeConfig::default(),
        )
        .unwrap();

        let scale = |m: &EmbeddingMatrix| {
            EmbeddingMatrix::new(
                m.ids().to_vec(),
                m.dim(),
                m.data().iter().map(|v| v * 10.0).collect(),
            )
            .unwrap()
        };
        let cfg = ProbeConfig {
            l2_strength: 1.0 / 100.0,
            ..ProbeConfig::default()
        };
        let scaled = train_linear_probe(
            &scale(&train),
            &train_y,
            &scale(&eval),
            &eval_y,
            "scaled",
            &cfg,
        )
        .unwrap();
        assert!(
            (base.auc - scaled.auc).abs() < 0.01,
            "base {} vs scaled {}",
            base.auc,
            scaled.auc
        );
    }

    #[test]
    fn projection_test_requires_wide_enough_space() {
        let (train, train_y, eval, eval_y) = gen_probe_split(5, 30, 3, 2.0);
        assert!(matches!(
            projection_test(&train, &train_y, &eval, &eval_y, 2, &ProbeConfig::default()),
            Err(DiagnosticsError::ProjectionTooWide { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pr_lies_between_one_and_dim(
            sigmas in proptest::collection::vec(0.0f64..10.0, 1..12),
        ) {
            prop_assume!(sigmas.iter().any(|&s| s > 0.0));
            let pr = participation_ratio(&sigmas).unwrap();
            prop_assert!(pr >= 1.0 - 1e-9);
            prop_assert!(pr <= sigmas.len() as f64 + 1e-9);
        }

        #[test]
        fn pr_equals_dim_exactly_under_equal_variance(
            s in 0.1f64..10.0,
            d in 1usize..16,
        ) {
            let sigmas = vec![s; d];
            let pr = participation_ratio(&sigmas).unwrap();
            prop_assert!((pr - d as f64).abs() < 1e-9);
        }

        #[test]
        fn dim90_never_exceeds_dim95(
            raw in proptest::collection::vec(0.01f64..1.0, 2..16),
        ) {
            let total: f64 = raw.iter().sum();
            let mut fracs: Vec<f64> = raw.iter().map(|v| v / total).collect();
            fracs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let d90 = effective_dims(&fracs, 0.90).unwrap();
            let d95 = effective_dims(&fracs, 0.95).unwrap();
            prop_assert!(d90 <= d95);
            prop_assert!(d90 >= 1 && d95 <= fracs.len());
        }

        #[test]
        fn auc_flips_under_negation(
            scores in proptest::collection::vec(-10.0f64..10.0, 8..40),
            flips in proptest::collection::vec(any::<bool>(), 8..40),
        ) {
            let n = scores.len().min(flips.len());
            let scores = &scores[..n];
            let labels = &flips[..n];
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let auc = auc_roc(scores, labels).unwrap();
            let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
            let flipped = auc_roc(&negated, labels).unwrap();
            prop_assert!((auc - (1.0 - flipped)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            scores in proptest::collection::vec(-5.0f64..5.0, 8..40),
            flips in proptest::collection::vec(any::<bool>(), 8..40),
        ) {
            let n = scores.len().min(flips.len());
            let scores = &scores[..n];
            let labels = &flips[..n];
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let auc = auc_roc(scores, labels).unwrap();
            let warped: Vec<f64> = scores.iter().map(|s| s.exp() + 3.0 * s).collect();
            let auc2 = auc_roc(&warped, labels).unwrap();
            prop_assert!((auc - auc2).abs() < 1e-12);
        }
    }
}
