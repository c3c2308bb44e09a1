//! Weighted cross-entropy plus the masked-input entropy term, with analytic
//! gradients and a finite-difference checker.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, TokenId};
use crate::error::{Error, Result};
use crate::model::{Dims, ForwardOutput, ModelParams};
use crate::rng;

use super::weights::WeightTable;

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn clamped_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// `Σ_c p_c · ln p_c` (negative entropy); lies in `[−ln C, 0]`.
pub fn neg_entropy(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| p * clamped_ln(p)).sum()
}

/// Components of the training objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    /// Mean (weighted) cross-entropy over the batch.
    pub cross_entropy: f64,
    /// Negative entropy of the all-mask prediction.
    pub mask_term: f64,
    pub total: f64,
}

fn example_weight(weights: Option<&WeightTable>, ex: &Example) -> Result<f64> {
    match weights {
        None => Ok(1.0),
        Some(t) => t.get(ex.language, ex.label).ok_or_else(|| {
            Error::Config(format!(
                "example `{}` (language {}, label {}) outside the weight table",
                ex.id, ex.language, ex.label
            ))
        }),
    }
}

fn check_finite(parts: LossParts) -> Result<LossParts> {
    if parts.total.is_finite() {
        Ok(parts)
    } else {
        Err(Error::Divergence {
            epoch: 0,
            step: 0,
            detail: format!(
                "cross-entropy {}, mask term {}",
                parts.cross_entropy, parts.mask_term
            ),
        })
    }
}

/// Batch objective: mean of `w[l][y] · (−ln p_y)` plus `lambda` times the
/// negative entropy of the prediction on `mask_len` mask tokens.
pub fn loss(
    params: &ModelParams,
    batch: &[&Example],
    weights: Option<&WeightTable>,
    lambda: f64,
    mask_len: usize,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut ce = 0.0;
    for ex in batch {
        let out = params.forward(&ex.tokens)?;
        ce += example_weight(weights, ex)? * -clamped_ln(out.probs[ex.label]);
    }
    ce /= batch.len() as f64;
    let mask_term = if lambda != 0.0 {
        neg_entropy(
            &params
                .forward(&vec![params.mask_id(); mask_len.max(1)])?
                .probs,
        )
    } else {
        0.0
    };
    check_finite(LossParts {
        cross_entropy: ce,
        mask_term,
        total: ce + lambda * mask_term,
    })
}

/// Backpropagates `dlogits` through the head and the mean pooling of
/// `tokens`, accumulating into `grad` (same layout as the parameters).
fn backprop(
    params: &ModelParams,
    tokens: &[TokenId],
    mean: &[f64],
    out: &ForwardOutput,
    dlogits: &[f64],
    grad: &mut [f64],
) {
    let Dims {
        embed_dim: d,
        hidden_dim: h,
        n_classes: c,
        ..
    } = params.dims();
    let [emb_off, hw_off, hb_off, ow_off, ob_off] = params.dims().offsets();
    let u = params.out_w();
    let w = params.hidden_w();

    let mut dz = vec![0.0; h];
    for j in 0..h {
        let a = out.pooled[j];
        let row = &u[j * c..(j + 1) * c];
        let mut da = 0.0;
        for k in 0..c {
            grad[ow_off + j * c + k] += a * dlogits[k];
            da += row[k] * dlogits[k];
        }
        dz[j] = da * (1.0 - a * a);
    }
    for k in 0..c {
        grad[ob_off + k] += dlogits[k];
    }
    for j in 0..h {
        grad[hb_off + j] += dz[j];
    }
    let mut de = vec![0.0; d];
    for i in 0..d {
        let row = &w[i * h..(i + 1) * h];
        let x = mean[i];
        let mut acc = 0.0;
        for j in 0..h {
            grad[hw_off + i * h + j] += x * dz[j];
            acc += row[j] * dz[j];
        }
        de[i] = acc;
    }
    let inv_n = 1.0 / tokens.len() as f64;
    for &t in tokens {
        let base = emb_off + t as usize * d;
        for i in 0..d {
            grad[base + i] += de[i] * inv_n;
        }
    }
}

/// [`loss`] together with its gradient, written into `grad` (overwritten).
pub fn loss_and_grad(
    params: &ModelParams,
    batch: &[&Example],
    weights: Option<&WeightTable>,
    lambda: f64,
    mask_len: usize,
    grad: &mut [f64],
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    assert_eq!(grad.len(), params.as_slice().len());
    grad.fill(0.0);
    let n = batch.len() as f64;
    let mut ce = 0.0;
    let mut dlogits = vec![0.0; params.dims().n_classes];
    for ex in batch {
        params.check_tokens(&ex.tokens)?;
        let mean = params.mean_embedding(ex.tokens.iter().copied());
        let out = params.head(&mean);
        let wt = example_weight(weights, ex)?;
        let p_y = out.probs[ex.label];
        ce += wt * -clamped_ln(p_y);
        // d(−ln p_y)/d logits = p − onehot(y); zero once the floor is active
        if p_y >= PROB_FLOOR {
            for (k, g) in dlogits.iter_mut().enumerate() {
                let target = if k == ex.label { 1.0 } else { 0.0 };
                *g = wt / n * (out.probs[k] - target);
            }
            backprop(params, &ex.tokens, &mean, &out, &dlogits, grad);
        }
    }
    ce /= n;

    let mut mask_term = 0.0;
    if lambda != 0.0 {
        let tokens = vec![params.mask_id(); mask_len.max(1)];
        let mean = params.mean_embedding(tokens.iter().copied());
        let out = params.head(&mean);
        mask_term = neg_entropy(&out.probs);
        // g_c = ∂(Σ p ln p)/∂p_c, then through the softmax Jacobian.
        let g: Vec<f64> = out
            .probs
            .iter()
            .map(|&p| {
                if p >= PROB_FLOOR {
                    p.ln() + 1.0
                } else {
                    PROB_FLOOR.ln()
                }
            })
            .collect();
        let pg: f64 = out.probs.iter().zip(&g).map(|(p, g)| p * g).sum();
        for (k, d) in dlogits.iter_mut().enumerate() {
            *d = lambda * out.probs[k] * (g[k] - pg);
        }
        backprop(params, &tokens, &mean, &out, &dlogits, grad);
    }
    check_finite(LossParts {
        cross_entropy: ce,
        mask_term,
        total: ce + lambda * mask_term,
    })
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub n_checked: usize,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` over the
    /// checked coordinates whose gradient magnitude exceeds
    /// [`GRAD_CHECK_REL_FLOOR`].
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Coordinates with both gradients below this magnitude are judged by
/// absolute error only; relative error is meaningless for them.
pub const GRAD_CHECK_REL_FLOOR: f64 = 1e-7;

/// Central finite-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Compares the analytic gradient with central differences (step
/// [`GRAD_CHECK_STEP`]) on up to `n_samples` coordinates, chosen by `seed`
/// among the dense layers and the embedding rows the batch touches.
pub fn grad_check(
    params: &ModelParams,
    batch: &[&Example],
    weights: Option<&WeightTable>,
    lambda: f64,
    mask_len: usize,
    n_samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut analytic = vec![0.0; params.as_slice().len()];
    loss_and_grad(params, batch, weights, lambda, mask_len, &mut analytic)?;

    let dims = params.dims();
    let [_, hw_off, ..] = dims.offsets();
    let mut rows: Vec<TokenId> = batch
        .iter()
        .flat_map(|e| e.tokens.iter().copied())
        .collect();
    rows.push(params.mask_id());
    rows.sort_unstable();
    rows.dedup();
    let mut candidates: Vec<usize> = rows
        .iter()
        .flat_map(|&t| {
            let base = t as usize * dims.embed_dim;
            base..base + dims.embed_dim
        })
        .chain(hw_off..dims.n_params())
        .collect();
    let mut rng = rng::stream(seed, "grad_check");
    candidates.shuffle(&mut rng);
    candidates.truncate(n_samples);

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        n_checked: candidates.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    for &i in &candidates {
        let x = params.as_slice()[i];
        probe.as_mut_slice()[i] = x + GRAD_CHECK_STEP;
        let up = loss(&probe, batch, weights, lambda, mask_len)?.total;
        probe.as_mut_slice()[i] = x - GRAD_CHECK_STEP;
        let down = loss(&probe, batch, weights, lambda, mask_len)?.total;
        probe.as_mut_slice()[i] = x;
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        report.max_abs_error = report.max_abs_error.max(abs);
        let scale = a.abs().max(numeric.abs());
        if scale > GRAD_CHECK_REL_FLOOR {
            report.max_rel_error = report.max_rel_error.max(abs / scale);
        }
    }
    Ok(report)
}
