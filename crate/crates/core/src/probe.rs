//! Language-identification probe on pooled representations.
//!
//! A multinomial logistic regression is fit on frozen pooled vectors to
//! predict the language of each input; its cross-validated accuracy
//! measures how separable languages are in the latent space.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::model::{softmax, ModelParams};
use crate::rng;

/// Pooled representation of every example, with its language.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub rows: Vec<Vec<f64>>,
    pub languages: Vec<usize>,
}

pub fn extract_features(params: &ModelParams, dataset: &[Example]) -> Result<FeatureSet> {
    if dataset.is_empty() {
        return Err(Error::Empty("probe dataset"));
    }
    let rows = dataset
        .iter()
        .map(|ex| {
            params.check_tokens(&ex.tokens).map_err(|e| {
                Error::VocabMismatch(format!("example `{}` does not fit the model: {e}", ex.id))
            })?;
            Ok(params.forward(&ex.tokens)?.pooled)
        })
        .collect::<Result<_>>()?;
    Ok(FeatureSet {
        rows,
        languages: dataset.iter().map(|e| e.language).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub folds: usize,
    /// L2 penalty on the weights (not the intercepts); the objective is
    /// `Σ_i CE_i + l2/2 · ‖W‖²`.
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once the largest gradient entry of the mean objective falls
    /// below this.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            folds: 5,
            l2: 1.0,
            max_iters: 1000,
            tolerance: 1e-6,
        }
    }
}

/// Fitted multinomial logistic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub dim: usize,
    pub n_classes: usize,
    /// Row-major `(dim + 1) × n_classes`; the last row holds intercepts.
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticModel {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let k = self.n_classes;
        let mut out = self.weights[self.dim * k..].to_vec();
        for (i, xi) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&self.weights[i * k..(i + 1) * k]) {
                *o += xi * w;
            }
        }
        out
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    /// Most probable class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.logits(x);
        let mut best = 0;
        for (i, z) in logits.iter().enumerate() {
            if *z > logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn accuracy(&self, rows: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = rows
            .iter()
            .zip(labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / rows.len() as f64
    }
}

/// Mean objective and its gradient at `weights`.
fn objective(
    rows: &[Vec<f64>],
    labels: &[usize],
    dim: usize,
    k: usize,
    l2: f64,
    weights: &[f64],
    grad: &mut [f64],
) -> f64 {
    let n = rows.len() as f64;
    grad.fill(0.0);
    let model = LogisticModel {
        dim,
        n_classes: k,
        weights: weights.to_vec(),
        iterations: 0,
        converged: false,
    };
    let mut total = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        let p = model.predict_proba(x);
        total -= p[y].max(1e-300).ln();
        for c in 0..k {
            let r = (p[c] - if c == y { 1.0 } else { 0.0 }) / n;
            for (i, xi) in x.iter().enumerate() {
                grad[i * k + c] += r * xi;
            }
            grad[dim * k + c] += r;
        }
    }
    let mut penalty = 0.0;
    for (g, w) in grad[..dim * k].iter_mut().zip(&weights[..dim * k]) {
        *g += l2 / n * w;
        penalty += w * w;
    }
    total / n + 0.5 * l2 / n * penalty
}

/// Fits a multinomial logistic regression by accelerated full-batch
/// gradient descent from zero, with a fixed step of `1/Lipschitz` and
/// restarts whenever the objective goes up.
pub fn fit_logreg(
    rows: &[Vec<f64>],
    labels: &[usize],
    l2: f64,
    max_iters: usize,
    tolerance: f64,
) -> Result<LogisticModel> {
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::Probe(
            "features and labels must be non-empty and aligned".into(),
        ));
    }
    let dim = rows[0].len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Probe("ragged feature matrix".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; k];
    for &y in labels {
        present[y] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Probe(
            "need at least two languages to fit a probe".into(),
        ));
    }
    if l2.is_nan() || l2 < 0.0 {
        return Err(Error::Probe("l2 must be nonnegative".into()));
    }

    let n = rows.len() as f64;
    let max_sq = rows
        .iter()
        .map(|r| 1.0 + r.iter().map(|x| x * x).sum::<f64>())
        .fold(0.0, f64::max);
    let step = 1.0 / (0.5 * max_sq + l2 / n);

    let size = (dim + 1) * k;
    let mut w = vec![0.0; size];
    let mut y = w.clone();
    let mut grad = vec![0.0; size];
    let mut t = 1.0f64;
    let mut prev_obj = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        let g_norm = {
            objective(rows, labels, dim, k, l2, &w, &mut grad);
            grad.iter().fold(0.0f64, |m, g| m.max(g.abs()))
        };
        if g_norm < tolerance {
            converged = true;
            break;
        }
        objective(rows, labels, dim, k, l2, &y, &mut grad);
        let next: Vec<f64> = y.iter().zip(&grad).map(|(yi, g)| yi - step * g).collect();
        let obj = objective(rows, labels, dim, k, l2, &next, &mut grad);
        if obj > prev_obj {
            // restart momentum from the current iterate
            t = 1.0;
            y.clone_from(&w);
            iterations += 1;
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        y = next
            .iter()
            .zip(&w)
            .map(|(xn, xo)| xn + beta * (xn - xo))
            .collect();
        w = next;
        t = t_next;
        prev_obj = obj;
        iterations += 1;
    }
    Ok(LogisticModel {
        dim,
        n_classes: k,
        weights: w,
        iterations,
        converged,
    })
}

/// Assigns each example to one of `k` folds, stratified by label: every
/// label's examples are shuffled with a seeded stream and dealt round-robin,
/// continuing the deal across labels so fold sizes differ by at most one.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 && labels.len() > 1 || k == 0 || k > labels.len() {
        return Err(Error::Probe(format!(
            "cannot split {} examples into {k} folds",
            labels.len()
        )));
    }
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut fold = vec![0; labels.len()];
    let mut dealt = 0usize;
    let mut rng = rng::stream(seed, "probe/folds");
    for l in 0..n_labels {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == l).collect();
        members.shuffle(&mut rng);
        for i in members {
            fold[i] = dealt % k;
            dealt += 1;
        }
    }
    Ok(fold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub n_per_language: Vec<usize>,
    pub l2: f64,
    pub seed: u64,
}

/// Stratified k-fold cross-validated accuracy of the language probe.
pub fn cross_validate(
    features: &FeatureSet,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let labels = &features.languages;
    let k = config.folds;
    let n_languages = labels.iter().max().map_or(0, |m| m + 1);
    let mut n_per_language = vec![0usize; n_languages];
    for &l in labels {
        n_per_language[l] += 1;
    }
    if k < 2 {
        return Err(Error::Probe("need at least 2 folds".into()));
    }
    if let Some((l, &n)) = n_per_language
        .iter()
        .enumerate()
        .find(|(_, &n)| n > 0 && n < k)
    {
        return Err(Error::Probe(format!(
            "language {l} has {n} examples, fewer than {k} folds"
        )));
    }
    let folds = stratified_folds(labels, k, seed)?;
    let mut fold_accuracies = Vec::with_capacity(k);
    for f in 0..k {
        let (mut train_x, mut train_y, mut test_x, mut test_y) = (vec![], vec![], vec![], vec![]);
        for (i, &fi) in folds.iter().enumerate() {
            if fi == f {
                test_x.push(features.rows[i].clone());
                test_y.push(labels[i]);
            } else {
                train_x.push(features.rows[i].clone());
                train_y.push(labels[i]);
            }
        }
        let model = fit_logreg(
            &train_x,
            &train_y,
            config.l2,
            config.max_iters,
            config.tolerance,
        )?;
        fold_accuracies.push(model.accuracy(&test_x, &test_y));
    }
    let mean_accuracy = fold_accuracies.iter().sum::<f64>() / k as f64;
    Ok(ProbeReport {
        fold_accuracies,
        mean_accuracy,
        n_per_language,
        l2: config.l2,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synthetic_vocab, CorpusSpec};
    use crate::model::ModelConfig;
    use rand::Rng as _;

    fn clusters(n_per: usize, sep: f64, seed: u64) -> FeatureSet {
        let mut rng = rng::stream(seed, "test/clusters");
        let mut rows = Vec::new();
        let mut languages = Vec::new();
        for l in 0..2 {
            for _ in 0..n_per {
                let center = if l == 0 { -sep } else { sep };
                rows.push(vec![
                    center + rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ]);
                languages.push(l);
            }
        }
        FeatureSet { rows, languages }
    }

    #[test]
    fn extract_shapes_and_duplicates() {
        let vocab = synthetic_vocab(&CorpusSpec::default()).unwrap();
        let p = ModelParams::init(&vocab, 3, &ModelConfig::default(), 0).unwrap();
        let ex = Example {
            id: "a".into(),
            language: 0,
            label: 0,
            tokens: vec![1, 2, 3],
        };
        let f = extract_features(&p, &[ex.clone(), ex.clone(), ex]).unwrap();
        assert_eq!(f.rows.len(), 3);
        assert!(f.rows.iter().all(|r| r.len() == 32));
        assert_eq!(f.rows[0], f.rows[2]);
        assert!(extract_features(&p, &[]).is_err());
        let bad = Example {
            id: "b".into(),
            language: 0,
            label: 0,
            tokens: vec![100_000],
        };
        assert!(matches!(
            extract_features(&p, &[bad]),
            Err(Error::VocabMismatch(_))
        ));
    }

    #[test]
    fn separated_clusters_are_fit_perfectly() {
        let f = clusters(50, 3.0, 1);
        let m = fit_logreg(&f.rows, &f.languages, 1.0, 1000, 1e-6).unwrap();
        assert_eq!(m.accuracy(&f.rows, &f.languages), 1.0);
    }

    #[test]
    fn identical_features_predict_the_majority() {
        let rows = vec![vec![0.3, -0.2]; 10];
        let labels = vec![0, 1, 1, 1, 0, 1, 1, 0, 1, 1];
        let m = fit_logreg(&rows, &labels, 1.0, 1000, 1e-9).unwrap();
        assert!((m.accuracy(&rows, &labels) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn heavy_regularization_shrinks_weights_to_zero() {
        let f = clusters(30, 1.0, 2);
        let m = fit_logreg(&f.rows, &f.languages, 1e9, 1000, 1e-12).unwrap();
        let w_max = m.weights[..m.dim * 2]
            .iter()
            .fold(0.0f64, |a, w| a.max(w.abs()));
        assert!(w_max < 1e-6, "{w_max}");
        let p = m.predict_proba(&f.rows[0]);
        assert!((p[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn single_language_is_rejected() {
        assert!(fit_logreg(&[vec![1.0], vec![2.0]], &[0, 0], 1.0, 10, 1e-6).is_err());
    }

    #[test]
    fn leave_one_out_fold_arithmetic() {
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let folds = stratified_folds(&labels, 10, 3).unwrap();
        let mut sizes = [0; 10];
        for f in folds {
            sizes[f] += 1;
        }
        assert_eq!(sizes, [1; 10]);
    }

    #[test]
    fn folds_partition_and_stratify() {
        let labels: Vec<usize> = (0..103).map(|i| if i % 3 == 0 { 1 } else { 0 }).collect();
        let folds = stratified_folds(&labels, 5, 8).unwrap();
        let global = labels.iter().filter(|&&l| l == 1).count() as f64 / labels.len() as f64;
        for f in 0..5 {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| folds[i] == f).collect();
            assert!(members.len() == 20 || members.len() == 21);
            let ones = members.iter().filter(|&&i| labels[i] == 1).count() as f64;
            assert!((ones - global * members.len() as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn separable_representations_cross_validate_high() {
        let f = clusters(40, 3.0, 4);
        let r = cross_validate(&f, &ProbeConfig::default(), 0).unwrap();
        assert!(r.mean_accuracy >= 0.99);
        assert_eq!(r.fold_accuracies.len(), 5);
        assert_eq!(r.n_per_language, vec![40, 40]);
    }

    #[test]
    fn shuffled_labels_sit_near_chance() {
        let mut f = clusters(150, 3.0, 5);
        let mut rng = rng::stream(5, "test/shuffle");
        f.languages.shuffle(&mut rng);
        let r = cross_validate(&f, &ProbeConfig::default(), 1).unwrap();
        // binomial sd of an accuracy over 300 predictions at p = 1/2
        let sigma = (0.25f64 / 300.0).sqrt();
        assert!(
            (r.mean_accuracy - 0.5).abs() <= 3.0 * sigma,
            "{}",
            r.mean_accuracy
        );
    }

    #[test]
    fn accuracy_ignores_feature_order() {
        let f = clusters(40, 0.4, 6);
        let permuted = FeatureSet {
            rows: f.rows.iter().map(|r| vec![r[2], r[0], r[1]]).collect(),
            languages: f.languages.clone(),
        };
        let a = cross_validate(&f, &ProbeConfig::default(), 2).unwrap();
        let b = cross_validate(&permuted, &ProbeConfig::default(), 2).unwrap();
        for (x, y) in a.fold_accuracies.iter().zip(&b.fold_accuracies) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_examples_per_language() {
        let f = clusters(3, 1.0, 7);
        assert!(cross_validate(&f, &ProbeConfig::default(), 0).is_err());
    }
}
