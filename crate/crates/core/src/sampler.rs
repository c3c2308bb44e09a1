//! Paired training subsets and balanced evaluation splits.
//!
//! The "balanced" subset follows a uniform joint distribution over
//! (language, label); the "imbalanced" one follows a skewed joint whose
//! marginals are still uniform. Both are drawn so that they share the
//! largest possible number of datapoints.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::rng;

const PROB_TOL: f64 = 1e-9;

/// Joint distribution over (language, label) as an L×C table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    probs: Vec<Vec<f64>>,
    uniform_marginals: bool,
}

impl JointSpec {
    /// Validates the table. With `uniform_marginals`, every row must sum to
    /// 1/L and every column to 1/C.
    pub fn new(probs: Vec<Vec<f64>>, uniform_marginals: bool) -> Result<Self> {
        let bad = |m: String| Err(Error::JointSpec(m));
        let n_languages = probs.len();
        let n_classes = probs.first().map_or(0, Vec::len);
        if n_languages == 0 || n_classes == 0 {
            return bad("empty table".into());
        }
        if probs.iter().any(|row| row.len() != n_classes) {
            return bad("ragged table".into());
        }
        if probs.iter().flatten().any(|p| !p.is_finite() || *p < 0.0) {
            return bad("entries must be finite and nonnegative".into());
        }
        let total: f64 = probs.iter().flatten().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return bad(format!("entries sum to {total}, expected 1"));
        }
        if uniform_marginals {
            for (l, row) in probs.iter().enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0 / n_languages as f64).abs() > PROB_TOL {
                    return bad(format!(
                        "language {l} has marginal {s}, expected 1/{n_languages}"
                    ));
                }
            }
            for c in 0..n_classes {
                let s: f64 = probs.iter().map(|row| row[c]).sum();
                if (s - 1.0 / n_classes as f64).abs() > PROB_TOL {
                    return bad(format!(
                        "label {c} has marginal {s}, expected 1/{n_classes}"
                    ));
                }
            }
        }
        Ok(JointSpec {
            probs,
            uniform_marginals,
        })
    }

    pub fn uniform(n_languages: usize, n_classes: usize) -> Result<Self> {
        let p = 1.0 / (n_languages * n_classes) as f64;
        JointSpec::new(vec![vec![p; n_classes]; n_languages], true)
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn n_languages(&self) -> usize {
        self.probs.len()
    }

    pub fn n_classes(&self) -> usize {
        self.probs[0].len()
    }

    pub fn uniform_marginals(&self) -> bool {
        self.uniform_marginals
    }
}

/// Built-in joint distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Five labels, two language groups with within-language label
    /// fractions 1:2:3:4:5 and 5:4:3:2:1.
    AmazonSkew,
    /// Two languages, three labels, fractions 3:2:1 and 1:2:3.
    XnliSkew,
    Uniform,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amazon_skew" => Ok(Preset::AmazonSkew),
            "xnli_skew" => Ok(Preset::XnliSkew),
            "uniform" => Ok(Preset::Uniform),
            other => Err(Error::JointSpec(format!("unknown preset `{other}`"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::AmazonSkew => "amazon_skew",
            Preset::XnliSkew => "xnli_skew",
            Preset::Uniform => "uniform",
        })
    }
}

pub fn preset(name: Preset, n_languages: usize, n_classes: usize) -> Result<JointSpec> {
    let rows = |ratios: &[&[f64]]| -> Vec<Vec<f64>> {
        let lang_share = 1.0 / n_languages as f64;
        (0..n_languages)
            .map(|l| {
                let r = ratios[l * ratios.len() / n_languages];
                let total: f64 = r.iter().sum();
                r.iter().map(|x| x / total * lang_share).collect()
            })
            .collect()
    };
    match name {
        Preset::Uniform => {
            if n_languages == 0 || n_classes == 0 {
                return Err(Error::JointSpec("uniform preset needs L, C ≥ 1".into()));
            }
            JointSpec::uniform(n_languages, n_classes)
        }
        Preset::AmazonSkew => {
            if n_classes != 5 || n_languages == 0 || !n_languages.is_multiple_of(2) {
                return Err(Error::JointSpec(format!(
                    "amazon_skew needs C = 5 and an even L, got L = {n_languages}, C = {n_classes}"
                )));
            }
            JointSpec::new(
                rows(&[&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 4.0, 3.0, 2.0, 1.0]]),
                true,
            )
        }
        Preset::XnliSkew => {
            if n_languages != 2 || n_classes != 3 {
                return Err(Error::JointSpec(format!(
                    "xnli_skew needs L = 2, C = 3, got L = {n_languages}, C = {n_classes}"
                )));
            }
            JointSpec::new(rows(&[&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]]), true)
        }
    }
}

/// Integer cell counts for one subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetPlan {
    pub counts: Vec<Vec<usize>>,
    pub n: usize,
}

/// Largest-remainder apportionment of `total` over `weights`. Ties in the
/// remainder go to the lower index.
fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        // spread evenly when the row carries no mass
        for i in 0..total {
            out[i % weights.len()] += 1;
        }
        return out;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut out: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Remainders are compared after rounding away float noise so that exact
    // quotas such as 15.000000000000002 do not win spurious seats.
    let rem = |i: usize| ((quotas[i] - out[i] as f64) * 1e9).round();
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        out[i] += 1;
    }
    out
}

/// Rounds `n · probs` to integers: first across languages, then within each
/// language row, both by largest remainder. Units are then shifted within
/// rows until every label total sits on the floor or ceiling of its quota.
pub fn plan_counts(spec: &JointSpec, n: usize) -> Result<SubsetPlan> {
    let n_languages = spec.n_languages();
    let n_classes = spec.n_classes();
    if n < n_languages * n_classes {
        return Err(Error::Sampling(format!(
            "subset size {n} smaller than the number of cells {}",
            n_languages * n_classes
        )));
    }
    if spec.uniform_marginals() && !n.is_multiple_of(n_languages) {
        return Err(Error::Sampling(format!(
            "subset size {n} not divisible by the number of languages {n_languages}"
        )));
    }
    let row_mass: Vec<f64> = spec.probs().iter().map(|r| r.iter().sum()).collect();
    let row_totals = largest_remainder(n, &row_mass);
    let quotas: Vec<Vec<f64>> = spec
        .probs()
        .iter()
        .zip(&row_totals)
        .map(|(row, &total)| {
            let s: f64 = row.iter().sum();
            row.iter()
                .map(|p| if s > 0.0 { total as f64 * p / s } else { 0.0 })
                .collect()
        })
        .collect();
    let mut counts: Vec<Vec<usize>> = spec
        .probs()
        .iter()
        .zip(&row_totals)
        .map(|(row, &total)| largest_remainder(total, row))
        .collect();
    balance_columns(&quotas, &mut counts);
    Ok(SubsetPlan { counts, n })
}

/// Moves single units between cells of the same row so that every column
/// sum lands on the floor or ceiling of its quota. Row sums are untouched
/// and every cell stays on the floor or ceiling of its own quota. Each move
/// follows an augmenting path: column `a` gives a unit to column `b` through
/// a row where `a` was rounded up and `b` was rounded down.
fn balance_columns(quotas: &[Vec<f64>], counts: &mut [Vec<usize>]) {
    let n_classes = quotas.first().map_or(0, Vec::len);
    let snap = |x: f64| (x * 1e9).round() / 1e9;
    let floor_of = |r: usize, j: usize| snap(quotas[r][j]).floor() as usize;
    let ceil_of = |r: usize, j: usize| snap(quotas[r][j]).ceil() as usize;
    let col_quota: Vec<f64> = (0..n_classes)
        .map(|j| snap(quotas.iter().map(|r| r[j]).sum()))
        .collect();
    let (lo, hi): (Vec<usize>, Vec<usize>) = col_quota
        .iter()
        .map(|q| (q.floor() as usize, q.ceil() as usize))
        .unzip();

    for _ in 0..counts.len() * n_classes * 4 + 4 {
        let sums: Vec<usize> = (0..n_classes)
            .map(|j| counts.iter().map(|r| r[j]).sum())
            .collect();
        let (sources, is_sink): (Vec<usize>, Box<dyn Fn(usize) -> bool>) =
            if let Some(j) = (0..n_classes).find(|&j| sums[j] > hi[j]) {
                let sums = sums.clone();
                let hi = hi.clone();
                (vec![j], Box::new(move |k| sums[k] < hi[k]))
            } else if let Some(k) = (0..n_classes).find(|&k| sums[k] < lo[k]) {
                let sources = (0..n_classes).filter(|&j| sums[j] > lo[j]).collect();
                (sources, Box::new(move |x| x == k))
            } else {
                return;
            };

        // breadth-first search over columns; `via[k]` = (previous column, row)
        let mut via: Vec<Option<(usize, usize)>> = vec![None; n_classes];
        let mut visited = vec![false; n_classes];
        let mut queue = std::collections::VecDeque::new();
        for &s in &sources {
            visited[s] = true;
            queue.push_back(s);
        }
        let mut found = None;
        'search: while let Some(a) = queue.pop_front() {
            for (r, row) in counts.iter().enumerate() {
                if row[a] <= floor_of(r, a) {
                    continue;
                }
                for b in 0..n_classes {
                    if visited[b] || row[b] >= ceil_of(r, b) {
                        continue;
                    }
                    visited[b] = true;
                    via[b] = Some((a, r));
                    if is_sink(b) {
                        found = Some(b);
                        break 'search;
                    }
                    queue.push_back(b);
                }
            }
        }
        let Some(mut b) = found else { return };
        while let Some((a, r)) = via[b] {
            counts[r][a] -= 1;
            counts[r][b] += 1;
            b = a;
        }
    }
}

/// Outcome of [`sample_paired`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub balanced: SubsetPlan,
    pub imbalanced: SubsetPlan,
    pub overlap_per_cell: Vec<Vec<usize>>,
    pub overlap: usize,
    pub seed: u64,
}

/// Groups pool examples by cell, each cell sorted by id so results do not
/// depend on pool order.
fn group_cells(
    pool: &[Example],
    n_languages: usize,
    n_classes: usize,
) -> Result<Vec<Vec<&Example>>> {
    let mut cells = vec![Vec::new(); n_languages * n_classes];
    let mut seen = HashSet::with_capacity(pool.len());
    for ex in pool {
        if ex.language >= n_languages || ex.label >= n_classes {
            return Err(Error::Sampling(format!(
                "example `{}` outside the {n_languages}×{n_classes} table",
                ex.id
            )));
        }
        if !seen.insert(ex.id.as_str()) {
            return Err(Error::DuplicateId(ex.id.clone()));
        }
        cells[ex.language * n_classes + ex.label].push(ex);
    }
    for cell in &mut cells {
        cell.sort_by(|a, b| a.id.cmp(&b.id));
    }
    Ok(cells)
}

fn shuffled_cell<'a>(
    cell: &[&'a Example],
    seed: u64,
    tag: &str,
    l: usize,
    c: usize,
) -> Vec<&'a Example> {
    let mut items = cell.to_vec();
    let mut rng = rng::stream(seed, &format!("{tag}/cell={l},{c}"));
    items.shuffle(&mut rng);
    items
}

/// Draws a balanced and an imbalanced subset of size `n` from `pool`.
///
/// Within every cell the pool is shuffled with a cell-specific stream; the
/// subset needing more examples takes the longer prefix and the other takes
/// the shorter one, so the two share exactly `min(n_bal, n_imbal)` examples
/// per cell, the largest overlap any pair of subsets with these counts can
/// have.
pub fn sample_paired(
    pool: &[Example],
    spec_imbal: &JointSpec,
    n: usize,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>, OverlapReport)> {
    let n_languages = spec_imbal.n_languages();
    let n_classes = spec_imbal.n_classes();
    let balanced_plan = plan_counts(&JointSpec::uniform(n_languages, n_classes)?, n)?;
    let imbalanced_plan = plan_counts(spec_imbal, n)?;
    let cells = group_cells(pool, n_languages, n_classes)?;

    let mut balanced = Vec::with_capacity(n);
    let mut imbalanced = Vec::with_capacity(n);
    let mut overlap_per_cell = vec![vec![0; n_classes]; n_languages];
    for l in 0..n_languages {
        for c in 0..n_classes {
            let nb = balanced_plan.counts[l][c];
            let ni = imbalanced_plan.counts[l][c];
            let cell = &cells[l * n_classes + c];
            let needed = nb.max(ni);
            if cell.len() < needed {
                return Err(Error::InsufficientPool {
                    language: l,
                    label: c,
                    needed,
                    available: cell.len(),
                });
            }
            let drawn = shuffled_cell(cell, seed, "paired", l, c);
            balanced.extend(drawn[..nb].iter().map(|e| (*e).clone()));
            imbalanced.extend(drawn[..ni].iter().map(|e| (*e).clone()));
            overlap_per_cell[l][c] = nb.min(ni);
        }
    }
    let overlap = overlap_per_cell.iter().flatten().sum();
    let report = OverlapReport {
        balanced: balanced_plan,
        imbalanced: imbalanced_plan,
        overlap_per_cell,
        overlap,
        seed,
    };
    Ok((balanced, imbalanced, report))
}

/// Draws validation and test splits that are uniform over all cells.
///
/// `pool` must not contain any id from `exclude` (typically the training
/// subsets); both sizes must be multiples of the number of cells.
pub fn split_eval(
    pool: &[Example],
    exclude: &HashSet<String>,
    n_languages: usize,
    n_classes: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    let n_cells = n_languages * n_classes;
    for (what, size) in [("validation", n_val), ("test", n_test)] {
        if size % n_cells != 0 {
            return Err(Error::Sampling(format!(
                "{what} size {size} not divisible by the number of cells {n_cells}"
            )));
        }
    }
    if let Some(ex) = pool.iter().find(|e| exclude.contains(&e.id)) {
        return Err(Error::Sampling(format!(
            "example `{}` is already used for training",
            ex.id
        )));
    }
    let cells = group_cells(pool, n_languages, n_classes)?;
    let (per_val, per_test) = (n_val / n_cells, n_test / n_cells);
    let mut val = Vec::with_capacity(n_val);
    let mut test = Vec::with_capacity(n_test);
    for l in 0..n_languages {
        for c in 0..n_classes {
            let cell = &cells[l * n_classes + c];
            if cell.len() < per_val + per_test {
                return Err(Error::InsufficientPool {
                    language: l,
                    label: c,
                    needed: per_val + per_test,
                    available: cell.len(),
                });
            }
            let drawn = shuffled_cell(cell, seed, "eval", l, c);
            val.extend(drawn[..per_val].iter().map(|e| (*e).clone()));
            test.extend(
                drawn[per_val..per_val + per_test]
                    .iter()
                    .map(|e| (*e).clone()),
            );
        }
    }
    Ok((val, test))
}

/// Ids of a set of examples.
pub fn id_set(examples: &[Example]) -> HashSet<String> {
    examples.iter().map(|e| e.id.clone()).collect()
}

/// Cell histogram keyed by (language, label), for reports.
pub fn histogram(examples: &[Example]) -> BTreeMap<(usize, usize), usize> {
    let mut out = BTreeMap::new();
    for e in examples {
        *out.entry((e.language, e.label)).or_insert(0) += 1;
    }
    out
}
