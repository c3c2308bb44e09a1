use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Vocab};
use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageMetrics {
    pub n: usize,
    pub accuracy: f64,
    /// How often each label was predicted.
    pub predicted_counts: Vec<usize>,
    /// `predicted_counts` as fractions of `n`.
    pub predicted_distribution: Vec<f64>,
    pub true_distribution: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub per_language: Vec<LanguageMetrics>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Accuracy overall and per language, plus the per-language distribution
/// of predicted labels. Ties in the output go to the lowest label.
pub fn evaluate(params: &ModelParams, test: &[Example], n_languages: usize) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let n_classes = params.dims().n_classes;
    let mut predicted = vec![vec![0usize; n_classes]; n_languages];
    let mut truth = vec![vec![0usize; n_classes]; n_languages];
    let mut correct = vec![0usize; n_languages];
    for ex in test {
        if ex.language >= n_languages || ex.label >= n_classes {
            return Err(Error::VocabMismatch(format!(
                "example `{}` outside the {n_languages}×{n_classes} table",
                ex.id
            )));
        }
        let y_hat = argmax(&params.forward(&ex.tokens)?.probs);
        predicted[ex.language][y_hat] += 1;
        truth[ex.language][ex.label] += 1;
        if y_hat == ex.label {
            correct[ex.language] += 1;
        }
    }
    let frac = |counts: &[usize], n: usize| -> Vec<f64> {
        counts
            .iter()
            .map(|&k| if n == 0 { 0.0 } else { k as f64 / n as f64 })
            .collect()
    };
    let per_language = (0..n_languages)
        .map(|l| {
            let n: usize = truth[l].iter().sum();
            LanguageMetrics {
                n,
                accuracy: if n == 0 {
                    f64::NAN
                } else {
                    correct[l] as f64 / n as f64
                },
                predicted_distribution: frac(&predicted[l], n),
                true_distribution: frac(&truth[l], n),
                predicted_counts: predicted[l].clone(),
            }
        })
        .collect();
    Ok(EvalMetrics {
        n: test.len(),
        accuracy: correct.iter().sum::<usize>() as f64 / test.len() as f64,
        per_language,
    })
}

impl EvalMetrics {
    /// Predicted-label distribution as a CSV table: one row per language,
    /// one column per label, values in percent.
    pub fn distribution_csv(&self, vocab: &Vocab) -> String {
        let mut out = String::from("language");
        for label in vocab.labels() {
            out.push(',');
            out.push_str(label);
        }
        out.push('\n');
        for (l, m) in self.per_language.iter().enumerate() {
            out.push_str(vocab.languages().get(l).map_or("?", String::as_str));
            for p in &m.predicted_distribution {
                out.push_str(&format!(",{:.2}", 100.0 * p));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::model::ModelConfig;

    fn corpus() -> (Vocab, Vec<Example>) {
        let spec = CorpusSpec {
            signal_rate: 1.0,
            noise_rate: 0.0,
            signals_per_language_class: 1,
            min_tokens: 1,
            max_tokens: 1,
            ..CorpusSpec::default()
        };
        generate_corpus(&spec, 4).unwrap()
    }

    fn model(vocab: &Vocab) -> ModelParams {
        let cfg = ModelConfig {
            embed_dim: 3,
            hidden_dim: 3,
            embed_init_std: 0.0,
            zero_mask_init: false,
        };
        let mut p = ModelParams::init(vocab, 3, &cfg, 0).unwrap();
        p.hidden_w_mut().fill(0.0);
        p.hidden_b_mut().fill(0.0);
        p.out_w_mut().fill(0.0);
        p.out_b_mut().fill(0.0);
        p
    }

    #[test]
    fn perfect_classifier() {
        let (vocab, ex) = corpus();
        let mut p = model(&vocab);
        // one-hot embedding of each signal token's label, identity layers
        for l in 0..2 {
            for c in 0..3 {
                let t = vocab.signals(l, c)[0];
                p.embedding_row_mut(t)[c] = 2.0;
            }
        }
        for i in 0..3 {
            p.hidden_w_mut()[i * 3 + i] = 1.0;
            p.out_w_mut()[i * 3 + i] = 10.0;
        }
        let m = evaluate(&p, &ex, 2).unwrap();
        assert_eq!(m.accuracy, 1.0);
        for lm in &m.per_language {
            assert_eq!(lm.accuracy, 1.0);
            assert_eq!(lm.predicted_distribution, lm.true_distribution);
        }
    }

    #[test]
    fn constant_classifier() {
        let (vocab, ex) = corpus();
        let mut p = model(&vocab);
        p.out_b_mut()[0] = 1.0;
        let m = evaluate(&p, &ex, 2).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 1e-12);
        for lm in &m.per_language {
            assert_eq!(lm.predicted_distribution, vec![1.0, 0.0, 0.0]);
        }
        let csv = m.distribution_csv(&vocab);
        assert_eq!(
            csv,
            "language,label0,label1,label2\nlang0,100.00,0.00,0.00\nlang1,100.00,0.00,0.00\n"
        );
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let (vocab, _) = corpus();
        assert!(evaluate(&model(&vocab), &[], 2).is_err());
    }
}
