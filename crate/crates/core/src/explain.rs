//! Shapley attributions under token masking and the cumulative SHAP
//! difference report.
//!
//! The coalition value of a set `A` of positions is the predicted
//! probability of the target label when every position outside `A` is
//! replaced by the mask token. The base value `b` is the value of the empty
//! coalition, so for every explanation `Σ S(t_i) + b = p(T, y)`.

use serde::{Deserialize, Serialize};

use crate::corpus::{Example, TokenId};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng;

use rand::seq::SliceRandom;

pub const DEFAULT_EXACT_LIMIT: usize = 12;
pub const DEFAULT_PERMUTATIONS: usize = 2000;
pub const DEFAULT_THRESHOLD: f64 = 0.01;

/// Largest length for which the sampled engine switches to enumerating all
/// permutations when asked for at least `n!` of them.
const FULL_ENUMERATION_LIMIT: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapExplanation {
    /// One value per token position.
    pub values: Vec<f64>,
    /// Probability of `label` on the all-mask input of the same length.
    pub base: f64,
    /// Probability of `label` on the unmasked input.
    pub prob: f64,
    pub label: usize,
    pub model_tag: String,
}

impl ShapExplanation {
    /// `Σ S + b − p`; zero up to rounding for every emitted explanation.
    pub fn additivity_residual(&self) -> f64 {
        self.values.iter().sum::<f64>() + self.base - self.prob
    }
}

/// Running sum of embeddings for a partially masked input; the pooled mean
/// is `sum / n`.
struct Coalition<'a> {
    params: &'a ModelParams,
    tokens: &'a [TokenId],
    sum: Vec<f64>,
}

impl<'a> Coalition<'a> {
    fn all_masked(params: &'a ModelParams, tokens: &'a [TokenId]) -> Self {
        let n = tokens.len() as f64;
        let sum = params
            .embedding_row(params.mask_id())
            .iter()
            .map(|e| e * n)
            .collect();
        Coalition {
            params,
            tokens,
            sum,
        }
    }

    fn add(&mut self, position: usize) {
        let e = self.params.embedding_row(self.tokens[position]);
        let m = self.params.embedding_row(self.params.mask_id());
        for ((s, x), y) in self.sum.iter_mut().zip(e).zip(m) {
            *s += x - y;
        }
    }

    fn probs(&self) -> Vec<f64> {
        let n = self.tokens.len() as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        self.params.head(&mean).probs
    }
}

/// Probabilities for every coalition, indexed by the bitmask of unmasked
/// positions (2ⁿ forward passes).
fn coalition_table(params: &ModelParams, tokens: &[TokenId]) -> Vec<Vec<f64>> {
    let n = tokens.len();
    let d = params.dims().embed_dim;
    let mask_row = params.embedding_row(params.mask_id());
    let diffs: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| {
            params
                .embedding_row(t)
                .iter()
                .zip(mask_row)
                .map(|(e, m)| e - m)
                .collect()
        })
        .collect();
    let size = 1usize << n;
    let mut sums = vec![0.0; size * d];
    for (s, m) in sums[..d].iter_mut().zip(mask_row) {
        *s = m * n as f64;
    }
    let mut table = Vec::with_capacity(size);
    let inv_n = 1.0 / n as f64;
    let mut mean = vec![0.0; d];
    for a in 0..size {
        if a > 0 {
            let low = a.trailing_zeros() as usize;
            let prev = a & (a - 1);
            let (head, tail) = sums.split_at_mut(a * d);
            let src = &head[prev * d..prev * d + d];
            for ((dst, s), x) in tail[..d].iter_mut().zip(src).zip(&diffs[low]) {
                *dst = s + x;
            }
        }
        for (m, s) in mean.iter_mut().zip(&sums[a * d..a * d + d]) {
            *m = s * inv_n;
        }
        table.push(params.head(&mean).probs);
    }
    table
}

fn shapley_from_table(table: &[Vec<f64>], n: usize, label: usize) -> Vec<f64> {
    // weight(k) = k! (n-1-k)! / n! = 1 / (n · binom(n-1, k))
    let mut binom = vec![1.0f64; n];
    for k in 1..n {
        binom[k] = binom[k - 1] * (n - k) as f64 / k as f64;
    }
    let weight: Vec<f64> = binom.iter().map(|b| 1.0 / (n as f64 * b)).collect();
    let mut values = vec![0.0; n];
    for (i, value) in values.iter_mut().enumerate() {
        let bit = 1usize << i;
        let mut acc = 0.0;
        for a in 0..table.len() {
            if a & bit == 0 {
                let k = a.count_ones() as usize;
                acc += weight[k] * (table[a | bit][label] - table[a][label]);
            }
        }
        *value = acc;
    }
    values
}

fn check_label(params: &ModelParams, label: usize) -> Result<()> {
    if label >= params.dims().n_classes {
        return Err(Error::Config(format!(
            "label {label} out of range for {} classes",
            params.dims().n_classes
        )));
    }
    Ok(())
}

/// Exact Shapley values by enumerating all 2ⁿ coalitions, for each label
/// in `labels`. Every coalition is evaluated once and shared across labels.
pub fn shapley_exact_labels(
    params: &ModelParams,
    tokens: &[TokenId],
    labels: &[usize],
    exact_limit: usize,
    model_tag: &str,
) -> Result<Vec<ShapExplanation>> {
    params.check_tokens(tokens)?;
    for &y in labels {
        check_label(params, y)?;
    }
    let n = tokens.len();
    if n > exact_limit || n >= usize::BITS as usize - 1 {
        return Err(Error::TooLongForExact {
            len: n,
            limit: exact_limit,
        });
    }
    let table = coalition_table(params, tokens);
    let full = table.len() - 1;
    Ok(labels
        .iter()
        .map(|&y| ShapExplanation {
            values: shapley_from_table(&table, n, y),
            base: table[0][y],
            prob: table[full][y],
            label: y,
            model_tag: model_tag.to_string(),
        })
        .collect())
}

/// Exact Shapley values for one label. Inputs longer than
/// [`DEFAULT_EXACT_LIMIT`] are refused.
pub fn shapley_exact(
    params: &ModelParams,
    tokens: &[TokenId],
    label: usize,
) -> Result<ShapExplanation> {
    let mut out = shapley_exact_labels(params, tokens, &[label], DEFAULT_EXACT_LIMIT, "")?;
    Ok(out.remove(0))
}

/// Rearranges `perm` into the next permutation in lexicographic order;
/// returns false after the last one.
fn next_permutation(perm: &mut [usize]) -> bool {
    let Some(i) = perm.windows(2).rposition(|w| w[0] < w[1]) else {
        return false;
    };
    let j = perm
        .iter()
        .rposition(|&x| x > perm[i])
        .expect("pivot has a successor");
    perm.swap(i, j);
    perm[i + 1..].reverse();
    true
}

fn factorial(n: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k))
}

/// Permutation-sampled Shapley values for each label in `labels`.
///
/// Marginal contributions are averaged over `n_permutations` seeded uniform
/// permutations; when that is at least `n!` (and `n` is small) every
/// permutation is enumerated once instead. The additivity residual is then
/// spread evenly over the positions so `Σ S + b = p` holds exactly.
pub fn shapley_sampled_labels(
    params: &ModelParams,
    tokens: &[TokenId],
    labels: &[usize],
    n_permutations: usize,
    seed: u64,
    model_tag: &str,
) -> Result<Vec<ShapExplanation>> {
    params.check_tokens(tokens)?;
    for &y in labels {
        check_label(params, y)?;
    }
    if n_permutations == 0 {
        return Err(Error::Config("n_permutations must be at least 1".into()));
    }
    let n = tokens.len();
    let empty = Coalition::all_masked(params, tokens).probs();
    let full = params.forward(tokens)?.probs;

    let mut totals = vec![vec![0.0; n]; labels.len()];
    let walk = |perm: &[usize], totals: &mut Vec<Vec<f64>>| {
        let mut coalition = Coalition::all_masked(params, tokens);
        let mut prev = empty.clone();
        for &i in perm {
            coalition.add(i);
            let cur = coalition.probs();
            for (acc, &y) in totals.iter_mut().zip(labels) {
                acc[i] += cur[y] - prev[y];
            }
            prev = cur;
        }
    };

    let exhaustive =
        n <= FULL_ENUMERATION_LIMIT && factorial(n).is_some_and(|f| n_permutations >= f);
    let mut perm: Vec<usize> = (0..n).collect();
    let count = if exhaustive {
        let mut count = 0usize;
        loop {
            walk(&perm, &mut totals);
            count += 1;
            if !next_permutation(&mut perm) {
                break;
            }
        }
        count
    } else {
        let mut rng = rng::stream(seed, "shapley/permutations");
        for _ in 0..n_permutations {
            perm.shuffle(&mut rng);
            walk(&perm, &mut totals);
        }
        n_permutations
    };

    Ok(labels
        .iter()
        .zip(totals)
        .map(|(&y, total)| {
            let mut values: Vec<f64> = total.iter().map(|t| t / count as f64).collect();
            let residual = (full[y] - empty[y]) - values.iter().sum::<f64>();
            for v in &mut values {
                *v += residual / n as f64;
            }
            ShapExplanation {
                values,
                base: empty[y],
                prob: full[y],
                label: y,
                model_tag: model_tag.to_string(),
            }
        })
        .collect())
}

pub fn shapley_sampled(
    params: &ModelParams,
    tokens: &[TokenId],
    label: usize,
    n_permutations: usize,
    seed: u64,
) -> Result<ShapExplanation> {
    let mut out = shapley_sampled_labels(params, tokens, &[label], n_permutations, seed, "")?;
    Ok(out.remove(0))
}

/// Chooses between the exact and the sampled engine by input length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub exact_limit: usize,
    pub n_permutations: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            exact_limit: DEFAULT_EXACT_LIMIT,
            n_permutations: DEFAULT_PERMUTATIONS,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn explain(
        &self,
        params: &ModelParams,
        tokens: &[TokenId],
        labels: &[usize],
        model_tag: &str,
    ) -> Result<Vec<ShapExplanation>> {
        if tokens.len() <= self.exact_limit {
            shapley_exact_labels(params, tokens, labels, self.exact_limit, model_tag)
        } else {
            shapley_sampled_labels(
                params,
                tokens,
                labels,
                self.n_permutations,
                self.seed,
                model_tag,
            )
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Neg,
    Neutral,
    Pos,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Neg, Category::Neutral, Category::Pos];

    pub fn name(self) -> &'static str {
        match self {
            Category::Neg => "neg",
            Category::Neutral => "neutral",
            Category::Pos => "pos",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCategories {
    pub categories: Vec<Category>,
    pub threshold: f64,
}

/// Splits positions by the reference model's values: `pos` above `θ`,
/// `neg` below `−θ`, `neutral` otherwise (the boundaries are neutral).
pub fn categorize(reference: &ShapExplanation, threshold: f64) -> Result<TokenCategories> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Config(format!(
            "threshold {threshold} must be positive"
        )));
    }
    let categories = reference
        .values
        .iter()
        .map(|&s| {
            if s > threshold {
                Category::Pos
            } else if s < -threshold {
                Category::Neg
            } else {
                Category::Neutral
            }
        })
        .collect();
    Ok(TokenCategories {
        categories,
        threshold,
    })
}

/// Which label each datapoint is explained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Every datapoint is explained for each listed label; one report block
    /// per label.
    Fixed(Vec<usize>),
    /// Every datapoint is explained for its own label.
    True,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeDiffRow {
    pub language: usize,
    pub label: usize,
    pub category: Category,
    /// Mean over datapoints of `Σ_{t in category} (S_imbal(t) − S_bal(t))`.
    pub mean_cum_diff: f64,
    pub n_datapoints: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseValueRow {
    pub language: usize,
    pub label: usize,
    pub mean_base_reference: f64,
    pub mean_base_compared: f64,
    pub mean_abs_base_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub neg: f64,
    pub neutral: f64,
    pub pos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeDiffReport {
    pub rows: Vec<CumulativeDiffRow>,
    pub base_values: Vec<BaseValueRow>,
    pub threshold: f64,
    pub engine: EngineConfig,
    pub label_mode: LabelMode,
    /// Share of all categorized tokens falling in each category.
    pub split_fractions: SplitFractions,
    /// Largest `|Σ_categories − ((p_cmp − p_ref) − (b_cmp − b_ref))|` over
    /// datapoints.
    pub max_efficiency_residual: f64,
}

impl CumulativeDiffReport {
    pub fn row(
        &self,
        language: usize,
        label: usize,
        category: Category,
    ) -> Option<&CumulativeDiffRow> {
        self.rows
            .iter()
            .find(|r| r.language == language && r.label == label && r.category == category)
    }

    pub fn base(&self, language: usize, label: usize) -> Option<&BaseValueRow> {
        self.base_values
            .iter()
            .find(|r| r.language == language && r.label == label)
    }

    /// CSV with columns `language,label,category,mean_cum_diff,n_datapoints`.
    pub fn to_csv(&self, languages: &[String], labels: &[String]) -> String {
        let name =
            |names: &[String], i: usize| names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let mut out = String::from("language,label,category,mean_cum_diff,n_datapoints\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.9},{}\n",
                name(languages, r.language),
                name(labels, r.label),
                r.category.name(),
                r.mean_cum_diff,
                r.n_datapoints
            ));
        }
        out
    }
}

/// Compares `compared` (e.g. the model trained on imbalanced data) against
/// `reference` (the balanced model) over `dataset`.
///
/// Positions are categorized by the reference model's values; for each
/// datapoint the differences `S_cmp − S_ref` are summed per category, then
/// averaged per (language, label).
pub fn cumulative_diff(
    reference: &ModelParams,
    compared: &ModelParams,
    dataset: &[Example],
    n_languages: usize,
    label_mode: &LabelMode,
    threshold: f64,
    engine: &EngineConfig,
) -> Result<CumulativeDiffReport> {
    if reference.dims() != compared.dims() || reference.mask_id() != compared.mask_id() {
        return Err(Error::VocabMismatch(
            "compared models differ in dimensions or mask token".into(),
        ));
    }
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::Config(format!(
            "threshold {threshold} must be positive"
        )));
    }
    let n_classes = reference.dims().n_classes;
    if let LabelMode::Fixed(labels) = label_mode {
        if labels.is_empty() {
            return Err(Error::Config("no target labels".into()));
        }
        for &y in labels {
            check_label(reference, y)?;
        }
    }

    let cells = n_languages * n_classes;
    let mut sums = vec![[0.0f64; 3]; cells];
    let mut counts = vec![0usize; cells];
    let mut base_ref = vec![0.0; cells];
    let mut base_cmp = vec![0.0; cells];
    let mut base_abs = vec![0.0; cells];
    let mut split = [0usize; 3];
    let mut max_residual: f64 = 0.0;

    for ex in dataset {
        if ex.language >= n_languages {
            return Err(Error::VocabMismatch(format!(
                "example `{}` has language {} ≥ {n_languages}",
                ex.id, ex.language
            )));
        }
        let labels: Vec<usize> = match label_mode {
            LabelMode::Fixed(labels) => labels.clone(),
            LabelMode::True => vec![ex.label],
        };
        let ref_expl = engine.explain(reference, &ex.tokens, &labels, "reference")?;
        let cmp_expl = engine.explain(compared, &ex.tokens, &labels, "compared")?;
        for (r, c) in ref_expl.iter().zip(&cmp_expl) {
            let cats = categorize(r, threshold)?;
            let mut per_cat = [0.0f64; 3];
            for ((cat, sr), sc) in cats.categories.iter().zip(&r.values).zip(&c.values) {
                per_cat[cat.index()] += sc - sr;
                split[cat.index()] += 1;
            }
            let expected = (c.prob - r.prob) - (c.base - r.base);
            max_residual = max_residual.max((per_cat.iter().sum::<f64>() - expected).abs());
            let cell = ex.language * n_classes + r.label;
            for k in 0..3 {
                sums[cell][k] += per_cat[k];
            }
            counts[cell] += 1;
            base_ref[cell] += r.base;
            base_cmp[cell] += c.base;
            base_abs[cell] += (c.base - r.base).abs();
        }
    }

    let mut rows = Vec::new();
    let mut base_values = Vec::new();
    for language in 0..n_languages {
        for label in 0..n_classes {
            let cell = language * n_classes + label;
            let n = counts[cell];
            if n == 0 {
                continue;
            }
            for cat in Category::ALL {
                rows.push(CumulativeDiffRow {
                    language,
                    label,
                    category: cat,
                    mean_cum_diff: sums[cell][cat.index()] / n as f64,
                    n_datapoints: n,
                });
            }
            base_values.push(BaseValueRow {
                language,
                label,
                mean_base_reference: base_ref[cell] / n as f64,
                mean_base_compared: base_cmp[cell] / n as f64,
                mean_abs_base_diff: base_abs[cell] / n as f64,
            });
        }
    }
    let total = split.iter().sum::<usize>().max(1) as f64;
    Ok(CumulativeDiffReport {
        rows,
        base_values,
        threshold,
        engine: engine.clone(),
        label_mode: label_mode.clone(),
        split_fractions: SplitFractions {
            neg: split[0] as f64 / total,
            neutral: split[1] as f64 / total,
            pos: split[2] as f64 / total,
        },
        max_efficiency_residual: max_residual,
    })
}
