//! Frozen-encoder evaluation: pooled quantized features from the
//! normal-side extractor, a single linear layer fit on the train split
//! (logistic for classification, ridge for regression), rank-based AUC,
//! feature-space Fréchet distance (the FID analog, reported as FFD), Dice
//! against generator masks, and 2-D principal-component export.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::syndata::{self, Dataset, VideoClip};
use crate::train::{forward_generator, Direction, ModelState};

// ---- feature extraction -----------------------------------------------------

/// Eval-mode preprocessing followed by the normal-side (phi_a) encoder and
/// codebook; one pooled d-vector per clip.
pub fn extract_features(
    state: &ModelState<f32>,
    dataset: &Dataset,
    indices: &[usize],
    parallel: bool,
) -> Result<Array2<f64>> {
    let d = state.config.feature_dim;
    let mut out = Array2::zeros((indices.len(), d));
    for (row, &idx) in indices.iter().enumerate() {
        let clip = preprocess_eval(state, dataset.clip(idx))?;
        let fwd = forward_generator(state, &clip, Direction::AtoB, parallel)?;
        for (i, &v) in fwd.pooled.iter().enumerate() {
            out[[row, i]] = v as f64;
        }
    }
    Ok(out)
}

pub fn preprocess_eval(state: &ModelState<f32>, clip: &VideoClip) -> Result<VideoClip> {
    let mut rng = crate::util::rng_for(state.config.seed, "eval-aug", &[]);
    syndata::sample_and_augment(clip, &state.config.augment, &mut rng, false)
}

/// Pooled features of an already-preprocessed clip (e.g. a reconstruction).
pub fn extract_recon_features(
    state: &ModelState<f32>,
    clip: &VideoClip,
    parallel: bool,
) -> Result<Vec<f64>> {
    let fwd = forward_generator(state, clip, Direction::AtoB, parallel)?;
    Ok(fwd.pooled.iter().map(|&v| v as f64).collect())
}

// ---- linear probe ----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Classification,
    Regression,
}

#[derive(Clone, Debug)]
pub struct ProbeModel {
    pub weight: Vec<f64>,
    pub bias: f64,
    pub task: ProbeTask,
}

impl ProbeModel {
    /// Classification: probability of the positive class. Regression: the
    /// predicted value.
    pub fn predict(&self, features: &Array2<f64>) -> Array1<f64> {
        let n = features.nrows();
        let mut out = Array1::zeros(n);
        for i in 0..n {
            let z: f64 = self.bias
                + features
                    .row(i)
                    .iter()
                    .zip(&self.weight)
                    .map(|(x, w)| x * w)
                    .sum::<f64>();
            out[i] = match self.task {
                ProbeTask::Classification => 1.0 / (1.0 + (-z).exp()),
                ProbeTask::Regression => z,
            };
        }
        out
    }
}

const RIDGE: f64 = 1e-4;
const PROBE_TOL: f64 = 1e-8;
const PROBE_MAX_ITERS: usize = 200;

/// Fit the single linear layer on frozen features. Classification targets
/// must contain both classes; convergence is Newton steps to `1e-8`.
pub fn probe_fit(features: &Array2<f64>, targets: &[f64], task: ProbeTask) -> Result<ProbeModel> {
    let n = features.nrows();
    if n != targets.len() {
        return Err(Error::Shape(format!(
            "{n} feature rows vs {} targets",
            targets.len()
        )));
    }
    if n < 2 {
        return Err(Error::Data("probe needs at least two samples".into()));
    }
    match task {
        ProbeTask::Classification => {
            let pos = targets.iter().filter(|&&t| t > 0.5).count();
            if pos == 0 || pos == n {
                return Err(Error::Data(
                    "classification targets contain a single class".into(),
                ));
            }
            fit_logistic(features, targets)
        }
        ProbeTask::Regression => fit_ridge(features, targets),
    }
}

fn fit_logistic(features: &Array2<f64>, targets: &[f64]) -> Result<ProbeModel> {
    let (n, d) = features.dim();
    let p = d + 1; // weights plus bias
    let mut theta = DVector::<f64>::zeros(p);
    let x_of = |i: usize, j: usize| -> f64 {
        if j < d {
            features[[i, j]]
        } else {
            1.0
        }
    };
    for _ in 0..PROBE_MAX_ITERS {
        let mut grad = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let mut z = 0.0;
            for j in 0..p {
                z += theta[j] * x_of(i, j);
            }
            let pr = 1.0 / (1.0 + (-z).exp());
            let err = pr - targets[i];
            let s = (pr * (1.0 - pr)).max(1e-12);
            for j in 0..p {
                grad[j] += err * x_of(i, j);
                for k in 0..p {
                    hess[(j, k)] += s * x_of(i, j) * x_of(i, k);
                }
            }
        }
        // small Levenberg damping keeps separable problems solvable
        for j in 0..p {
            hess[(j, j)] += 1e-8 * n as f64;
        }
        let delta = hess
            .lu()
            .solve(&grad)
            .ok_or_else(|| Error::Numeric("singular probe Hessian".into()))?;
        theta -= &delta;
        if delta.amax() <= PROBE_TOL {
            break;
        }
    }
    Ok(ProbeModel {
        weight: theta.as_slice()[..d].to_vec(),
        bias: theta[d],
        task: ProbeTask::Classification,
    })
}

fn fit_ridge(features: &Array2<f64>, targets: &[f64]) -> Result<ProbeModel> {
    let (n, d) = features.dim();
    let p = d + 1;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let x_of = |i: usize, j: usize| -> f64 {
        if j < d {
            features[[i, j]]
        } else {
            1.0
        }
    };
    for i in 0..n {
        for j in 0..p {
            xty[j] += x_of(i, j) * targets[i];
            for k in 0..p {
                xtx[(j, k)] += x_of(i, j) * x_of(i, k);
            }
        }
    }
    // ridge on the weights, not the bias
    for j in 0..d {
        xtx[(j, j)] += RIDGE;
    }
    let theta = xtx
        .lu()
        .solve(&xty)
        .ok_or_else(|| Error::Numeric("singular ridge system".into()))?;
    Ok(ProbeModel {
        weight: theta.as_slice()[..d].to_vec(),
        bias: theta[d],
        task: ProbeTask::Regression,
    })
}

// ---- metrics ----------------------------------------------------------------

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frechet: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    pub n_samples: usize,
}

/// Mann-Whitney AUC with half credit for ties; `None` when only one class
/// is present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut stat = 0.0;
    for (si, &li) in scores.iter().zip(labels) {
        if !li {
            continue;
        }
        for (sj, &lj) in scores.iter().zip(labels) {
            if lj {
                continue;
            }
            stat += match si.partial_cmp(sj) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    Some(stat / (n_pos * n_neg) as f64)
}

/// Accuracy at the 0.5 threshold.
pub fn accuracy(scores: &[f64], labels: &[bool]) -> f64 {
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, &l)| (**s >= 0.5) == l)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

pub fn mean_absolute_error(preds: &[f64], targets: &[f64]) -> f64 {
    preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / preds.len().max(1) as f64
}

/// Classification metrics from probe scores.
pub fn metrics_classification(scores: &[f64], labels: &[bool]) -> Result<MetricReport> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Data("empty or mismatched metric inputs".into()));
    }
    Ok(MetricReport {
        auc: auc(scores, labels),
        acc: Some(accuracy(scores, labels)),
        mae: None,
        frechet: None,
        dice: None,
        n_samples: scores.len(),
    })
}

pub fn metrics_regression(preds: &[f64], targets: &[f64]) -> Result<MetricReport> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Data("empty or mismatched metric inputs".into()));
    }
    Ok(MetricReport {
        auc: None,
        acc: None,
        mae: Some(mean_absolute_error(preds, targets)),
        frechet: None,
        dice: None,
        n_samples: preds.len(),
    })
}

// ---- Fréchet feature distance -------------------------------------------------

fn mean_and_cov(feats: &Array2<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, d) = feats.dim();
    let mut mu = DVector::<f64>::zeros(d);
    for i in 0..n {
        for j in 0..d {
            mu[j] += feats[[i, j]];
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        for j in 0..d {
            let xj = feats[[i, j]] - mu[j];
            for k in j..d {
                let xk = feats[[i, k]] - mu[k];
                cov[(j, k)] += xj * xk;
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for j in 0..d {
        for k in j..d {
            let v = cov[(j, k)] / denom;
            cov[(j, k)] = v;
            cov[(k, j)] = v;
        }
    }
    // shrinkage when the sample count cannot support a full-rank estimate
    if n < d + 1 {
        for j in 0..d {
            cov[(j, j)] += 1e-6;
        }
    }
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = m.clone().symmetric_eigen();
    let d = m.nrows();
    let mut diag = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let ev = eig.eigenvalues[i];
        if ev < -1e-8 {
            return Err(Error::Numeric(format!(
                "matrix eigenvalue {ev} too negative for a PSD square root"
            )));
        }
        diag[(i, i)] = ev.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * diag * eig.eigenvectors.transpose())
}

/// Fréchet distance between the Gaussian moment matches of two feature
/// sets: ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
pub fn frechet_feature_distance(feats_a: &Array2<f64>, feats_b: &Array2<f64>) -> Result<f64> {
    if feats_a.ncols() != feats_b.ncols() {
        return Err(Error::Shape(format!(
            "feature dims {} vs {}",
            feats_a.ncols(),
            feats_b.ncols()
        )));
    }
    if feats_a.iter().chain(feats_b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite features".into()));
    }
    let (mu_a, cov_a) = mean_and_cov(feats_a);
    let (mu_b, cov_b) = mean_and_cov(feats_b);
    let diff = &mu_a - &mu_b;
    let mean_term = diff.dot(&diff);
    // Tr((S_a S_b)^{1/2}) via the symmetric product S_a^{1/2} S_b S_a^{1/2}
    let root_a = sqrt_psd(&cov_a)?;
    let inner = &root_a * &cov_b * &root_a;
    let eig = inner.symmetric_eigen();
    let mut trace_sqrt = 0.0;
    for ev in eig.eigenvalues.iter() {
        if *ev < -1e-8 {
            return Err(Error::Numeric(format!(
                "cross-covariance eigenvalue {ev} too negative"
            )));
        }
        trace_sqrt += ev.max(0.0).sqrt();
    }
    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * trace_sqrt;
    Ok(value.max(0.0))
}

// ---- Dice and reconstruction masks ----------------------------------------------

/// Overlap of two binary masks: 2|A∩B| / (|A| + |B|); both empty counts as
/// a perfect match.
pub fn dice(pred: &ndarray::ArrayView2<u8>, gt: &ndarray::ArrayView2<u8>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "mask shapes {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    if pred.iter().chain(gt.iter()).any(|&v| v > 1) {
        return Err(Error::Data("masks must be binary".into()));
    }
    let inter: usize = pred
        .iter()
        .zip(gt.iter())
        .filter(|(&a, &b)| a == 1 && b == 1)
        .count();
    let total: usize =
        pred.iter().filter(|&&v| v == 1).count() + gt.iter().filter(|&&v| v == 1).count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Threshold below which a reconstructed pixel counts as chamber interior:
/// the midpoint between the generator's cavity and wall intensities.
pub fn interior_threshold() -> f32 {
    ((syndata::CAVITY + syndata::WALL) / 2.0) as f32
}

/// Segment a reconstruction into per-structure masks by flood-filling the
/// dark (sub-threshold) region around each ground-truth structure centroid.
pub fn recon_structure_masks(recon: &VideoClip, gt_masks: &Array4<u8>) -> Array4<u8> {
    let (s, n, h, w) = gt_masks.dim();
    let thr = interior_threshold();
    let mut out = Array4::<u8>::zeros((s, n, h, w));
    for c in 0..s {
        for t in 0..n {
            let gt = gt_masks.index_axis(ndarray::Axis(0), c);
            let gt = gt.index_axis(ndarray::Axis(0), t);
            // centroid of the ground-truth structure
            let (mut cy, mut cx, mut count) = (0.0f64, 0.0f64, 0usize);
            for y in 0..h {
                for x in 0..w {
                    if gt[[y, x]] == 1 {
                        cy += y as f64;
                        cx += x as f64;
                        count += 1;
                    }
                }
            }
            if count == 0 {
                continue;
            }
            let (sy, sx) = (
                (cy / count as f64).round() as usize,
                (cx / count as f64).round() as usize,
            );
            if recon.frames[[t, sy, sx, 0]] >= thr {
                continue; // seed is not interior-dark; mask stays empty
            }
            // 4-neighborhood flood fill over dark pixels
            let mut stack = vec![(sy, sx)];
            let mut seen = vec![false; h * w];
            seen[sy * w + sx] = true;
            while let Some((y, x)) = stack.pop() {
                out[[c, t, y, x]] = 1;
                let neighbors = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < h
                        && nx < w
                        && !seen[ny * w + nx]
                        && recon.frames[[t, ny, nx, 0]] < thr
                    {
                        seen[ny * w + nx] = true;
                        stack.push((ny, nx));
                    }
                }
            }
        }
    }
    out
}

/// Mean Dice between reconstruction-derived masks and the ground truth over
/// all structures and frames.
pub fn dice_against_gt(recon: &VideoClip, gt_masks: &Array4<u8>) -> Result<f64> {
    let pred = recon_structure_masks(recon, gt_masks);
    let (s, n, _, _) = gt_masks.dim();
    let mut acc = 0.0;
    let mut count = 0usize;
    for c in 0..s {
        for t in 0..n {
            let p = pred.index_axis(ndarray::Axis(0), c);
            let p = p.index_axis(ndarray::Axis(0), t);
            let g = gt_masks.index_axis(ndarray::Axis(0), c);
            let g = g.index_axis(ndarray::Axis(0), t);
            acc += dice(&p, &g)?;
            count += 1;
        }
    }
    Ok(acc / count.max(1) as f64)
}

// ---- 2-D principal-component export ----------------------------------------------

/// Project features onto their top two principal components. Component
/// signs are fixed so the largest-magnitude loading is positive.
pub fn pca_2d(features: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = features.dim();
    if n < 2 || d < 2 {
        return Err(Error::Data(
            "need at least 2 samples and 2 dims for PCA".into(),
        ));
    }
    let (mu, cov) = mean_and_cov(features);
    let eig = cov.symmetric_eigen();
    // order eigenpairs by descending eigenvalue
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite")
    });
    let mut components = Vec::with_capacity(2);
    for &idx in order.iter().take(2) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let (mut max_abs, mut max_at) = (0.0, 0);
        for (i, &x) in v.iter().enumerate() {
            if x.abs() > max_abs {
                max_abs = x.abs();
                max_at = i;
            }
        }
        if v[max_at] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        components.push(v);
    }
    let mut out = Array2::zeros((n, 2));
    for i in 0..n {
        for (k, comp) in components.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..d {
                acc += (features[[i, j]] - mu[j]) * comp[j];
            }
            out[[i, k]] = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;
    use ndarray::arr2;
    use rand::Rng;

    #[test]
    fn auc_separation_and_ties() {
        let labels = [true, true, false, false];
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels), Some(1.0));
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &labels), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels), Some(0.0));
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn auc_invariant_under_monotone_transforms() {
        let mut rng = rng_for(1, "eval-test", &[]);
        let scores: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<bool> = (0..20).map(|_| rng.gen_range(0..2) == 1).collect();
        let base = auc(&scores, &labels);
        let squashed: Vec<f64> = scores
            .iter()
            .map(|&s| (3.0 * s).tanh() * 0.5 + 0.5)
            .collect();
        assert_eq!(base, auc(&squashed, &labels));
    }

    #[test]
    fn accuracy_and_mae_basics() {
        assert_eq!(accuracy(&[0.9, 0.1], &[true, false]), 1.0);
        assert_eq!(accuracy(&[0.9, 0.9], &[true, false]), 0.5);
        assert_eq!(mean_absolute_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(mean_absolute_error(&[1.0, 3.0], &[2.0, 2.0]), 1.0);
    }

    #[test]
    fn probe_separable_two_points() {
        let x = arr2(&[[1.0, 0.0], [-1.0, 0.0]]);
        let m = probe_fit(&x, &[1.0, 0.0], ProbeTask::Classification).unwrap();
        let p = m.predict(&x);
        assert!(p[0] > 0.5 && p[1] < 0.5);
        assert_eq!(accuracy(p.as_slice().unwrap(), &[true, false]), 1.0);
    }

    #[test]
    fn probe_regression_recovers_linear_targets() {
        let mut rng = rng_for(2, "eval-test", &[]);
        let x = Array2::from_shape_fn((30, 3), |_| rng.gen_range(-1.0..1.0));
        let targets: Vec<f64> = (0..30)
            .map(|i| 0.5 * x[[i, 0]] - 1.5 * x[[i, 1]] + 0.25 * x[[i, 2]] + 0.7)
            .collect();
        let m = probe_fit(&x, &targets, ProbeTask::Regression).unwrap();
        let preds = m.predict(&x);
        let mae = mean_absolute_error(preds.as_slice().unwrap(), &targets);
        assert!(mae <= 1e-5, "mae {mae}");
    }

    #[test]
    fn probe_single_class_rejected() {
        let x = arr2(&[[1.0], [2.0]]);
        assert!(matches!(
            probe_fit(&x, &[1.0, 1.0], ProbeTask::Classification),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn shuffled_label_probe_scores_near_chance() {
        // permutation-test oracle: random labels give AUC near 0.5 at n=40
        let mut rng = rng_for(3, "eval-test", &[]);
        let x = Array2::from_shape_fn((40, 8), |_| rng.gen_range(-1.0..1.0));
        let mut aucs = Vec::new();
        for trial in 0..5u64 {
            let mut shuffle_rng = rng_for(trial, "eval-shuffle", &[]);
            let labels: Vec<f64> = (0..40)
                .map(|_| {
                    if shuffle_rng.gen_range(0..2) == 1 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            if labels.iter().all(|&l| l == 1.0) || labels.iter().all(|&l| l == 0.0) {
                continue;
            }
            let m = probe_fit(&x, &labels, ProbeTask::Classification).unwrap();
            // held-out style check on fresh noise with the same labels
            let x2 = Array2::from_shape_fn((40, 8), |_| rng.gen_range(-1.0..1.0));
            let p = m.predict(&x2);
            let lab: Vec<bool> = labels.iter().map(|&l| l > 0.5).collect();
            if let Some(a) = auc(p.as_slice().unwrap(), &lab) {
                aucs.push(a);
            }
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!((mean - 0.5).abs() <= 0.15, "mean shuffled AUC {mean}");
    }

    #[test]
    fn frechet_identical_zero_univariate_and_symmetry() {
        let mut rng = rng_for(4, "eval-test", &[]);
        let a = Array2::from_shape_fn((20, 3), |_| rng.gen_range(-1.0..1.0));
        assert!(frechet_feature_distance(&a, &a).unwrap() <= 1e-9);
        // univariate closed form: N(0,1) vs N(1,4) -> (0-1)^2 + (1+4-2*2) = 2
        let c = 0.5f64.sqrt();
        let s1 = Array2::from_shape_vec((2, 1), vec![-c, c]).unwrap();
        let s2 = Array2::from_shape_vec((2, 1), vec![1.0 - 2.0 * c, 1.0 + 2.0 * c]).unwrap();
        let d = frechet_feature_distance(&s1, &s2).unwrap();
        assert!((d - 2.0).abs() <= 1e-9, "ffd {d}");
        let b = Array2::from_shape_fn((15, 3), |_| rng.gen_range(-1.0..1.0));
        let ab = frechet_feature_distance(&a, &b).unwrap();
        let ba = frechet_feature_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() <= 1e-9);
    }

    #[test]
    fn frechet_invariant_under_joint_rotation() {
        let mut rng = rng_for(5, "eval-test", &[]);
        let a = Array2::from_shape_fn((40, 2), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((40, 2), |(_, j)| rng.gen_range(-1.0..1.0) + j as f64);
        let base = frechet_feature_distance(&a, &b).unwrap();
        let theta: f64 = 0.83;
        let rot = |m: &Array2<f64>| -> Array2<f64> {
            let mut out = m.clone();
            for i in 0..m.nrows() {
                let (x, y) = (m[[i, 0]], m[[i, 1]]);
                out[[i, 0]] = theta.cos() * x - theta.sin() * y;
                out[[i, 1]] = theta.sin() * x + theta.cos() * y;
            }
            out
        };
        let rotated = frechet_feature_distance(&rot(&a), &rot(&b)).unwrap();
        assert!((base - rotated).abs() <= 1e-6, "{base} vs {rotated}");
    }

    #[test]
    fn dice_identities() {
        let a = arr2(&[[1u8, 1], [0, 0]]);
        let b = arr2(&[[0u8, 0], [1, 1]]);
        let z = arr2(&[[0u8, 0], [0, 0]]);
        assert_eq!(dice(&a.view(), &a.view()).unwrap(), 1.0);
        assert_eq!(dice(&a.view(), &b.view()).unwrap(), 0.0);
        assert_eq!(dice(&z.view(), &z.view()).unwrap(), 1.0);
        // half-overlapping equal-area masks
        let c = arr2(&[[1u8, 1], [0, 0]]);
        let d = arr2(&[[0u8, 1], [1, 0]]);
        assert_eq!(dice(&c.view(), &d.view()).unwrap(), 0.5);
        assert_eq!(
            dice(&c.view(), &d.view()).unwrap(),
            dice(&d.view(), &c.view()).unwrap()
        );
        let bad = arr2(&[[2u8, 0], [0, 0]]);
        assert!(matches!(dice(&bad.view(), &a.view()), Err(Error::Data(_))));
    }

    #[test]
    fn recon_masks_recover_rendered_interiors() {
        // a clean rendered clip segments to nearly its own ground truth
        let cfg = crate::syndata::GeneratorConfig::desk_default(
            crate::syndata::AnomalyKind::Structural,
        );
        let mut rng = rng_for(6, "clip-params", &[0]);
        let mut params =
            crate::syndata::sample_params(&cfg, crate::syndata::ClipClass::Normal, &mut rng);
        params.noise_sigma = 0.0;
        let (clip, label) = crate::syndata::render_clip(&params, 16, (64, 64)).unwrap();
        let d = dice_against_gt(&clip, &label.masks).unwrap();
        assert!(d > 0.9, "self-dice {d}");
    }

    #[test]
    fn pca_projects_to_two_columns_deterministically() {
        let mut rng = rng_for(7, "eval-test", &[]);
        let x = Array2::from_shape_fn((25, 6), |_| rng.gen_range(-1.0..1.0));
        let a = pca_2d(&x).unwrap();
        let b = pca_2d(&x).unwrap();
        assert_eq!(a.dim(), (25, 2));
        assert_eq!(a, b);
        // variance along the first component dominates the second
        let var = |col: usize, m: &Array2<f64>| -> f64 {
            let mean = m.column(col).sum() / m.nrows() as f64;
            m.column(col)
                .iter()
                .map(|v| (v - mean).powi(2))
                .sum::<f64>()
        };
        assert!(var(0, &a) >= var(1, &a));
    }
}
