//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed; the process
//! exits nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;

use pbl_core::corpus::{generate_examples, synthetic_vocab, CorpusSpec, Example, TokenId, Vocab};
use pbl_core::experiment::{
    neutral_mean, run_experiment, Arm, CorpusSource, ExperimentConfig, ExplainSettings,
    ProbeSettings, SeedResult, SyntheticProbeCorpus,
};
use pbl_core::explain::{shapley_exact, shapley_sampled};
use pbl_core::model::{ModelConfig, ModelParams};
use pbl_core::rng::{self, sha256_hex};
use pbl_core::sampler::{histogram, id_set, plan_counts, preset, sample_paired, Preset};
use pbl_core::training::{compute_weights, loss, loss_and_grad, neg_entropy, WeightTable};

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn small_vocab(fillers: usize, signals: usize) -> Vocab {
    synthetic_vocab(&CorpusSpec {
        fillers_per_language: fillers,
        signals_per_language_class: signals,
        ..CorpusSpec::default()
    })
    .unwrap()
}

/// A random model with a sharp enough head that attributions are not tiny.
fn random_model(vocab: &Vocab, seed: u64) -> ModelParams {
    let mut r = rng::stream(seed, "acceptance/model");
    let cfg = ModelConfig {
        embed_dim: r.random_range(2..8),
        hidden_dim: r.random_range(2..8),
        embed_init_std: r.random_range(0.3..1.5),
        zero_mask_init: r.random_bool(0.5),
    };
    let mut p = ModelParams::init(vocab, vocab.n_classes(), &cfg, seed).unwrap();
    let scale = r.random_range(1.0..5.0);
    for x in p.out_w_mut() {
        *x *= scale;
    }
    for x in p.hidden_b_mut() {
        *x = r.random_range(-0.5..0.5);
    }
    p
}

fn random_tokens(vocab: &Vocab, n: usize, seed: u64) -> Vec<TokenId> {
    let mut r = rng::stream(seed, "acceptance/tokens");
    (0..n)
        .map(|_| r.random_range(0..vocab.len() as TokenId))
        .collect()
}

// ---------------------------------------------------------------------------
// criterion 1: per-language class weights

/// Weight of cell (l, c) straight from within-language label fractions:
/// `n_l / (C · n_{l,c}) = 1 / (C · frac_{l,c})`.
fn weights_from_fractions(fractions: &[Vec<f64>]) -> Vec<Vec<f64>> {
    fractions
        .iter()
        .map(|row| row.iter().map(|f| 1.0 / (row.len() as f64 * f)).collect())
        .collect()
}

fn table_of(w: &WeightTable, l: usize, c: usize) -> Vec<Vec<f64>> {
    (0..l)
        .map(|i| (0..c).map(|j| w.get(i, j).unwrap()).collect())
        .collect()
}

fn criterion_1() -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    // printed label fractions of the imbalanced training subsets
    let amazon_printed = [[6.6, 13.3, 20.0, 26.7, 33.3], [33.3, 26.7, 20.0, 13.3, 6.6]];
    let xnli_printed = [[50.0, 33.33, 16.67], [16.67, 33.33, 50.0]];
    let amazon_exact: Vec<Vec<f64>> = vec![
        (1..=5).map(|k| k as f64 / 15.0).collect(),
        (1..=5).rev().map(|k| k as f64 / 15.0).collect(),
    ];
    let xnli_exact: Vec<Vec<f64>> = vec![
        vec![0.5, 1.0 / 3.0, 1.0 / 6.0],
        vec![1.0 / 6.0, 1.0 / 3.0, 0.5],
    ];
    for (printed, exact) in [
        (
            amazon_printed
                .iter()
                .map(|r| r.to_vec())
                .collect::<Vec<_>>(),
            &amazon_exact,
        ),
        (
            xnli_printed.iter().map(|r| r.to_vec()).collect(),
            &xnli_exact,
        ),
    ] {
        for (pr, er) in printed.iter().zip(exact.iter()) {
            for (p, e) in pr.iter().zip(er) {
                // printed percentages are rounded (6.6 for 6.67)
                ok &= (p / 100.0 - e).abs() < 1e-3;
            }
        }
    }

    let cases = [
        (
            "amazon_skew",
            Preset::AmazonSkew,
            2,
            5,
            amazon_exact.clone(),
            vec![3.0, 1.5, 1.0, 0.75, 0.6],
        ),
        (
            "xnli_skew",
            Preset::XnliSkew,
            2,
            3,
            xnli_exact.clone(),
            vec![2.0 / 3.0, 1.0, 2.0],
        ),
        (
            "uniform",
            Preset::Uniform,
            2,
            3,
            vec![vec![1.0 / 3.0; 3]; 2],
            vec![1.0; 3],
        ),
    ];
    for (name, p, l, c, fractions, expected_first) in cases {
        let oracle = weights_from_fractions(&fractions);
        let plan = plan_counts(&preset(p, l, c).unwrap(), 3000).unwrap();
        let counts: Vec<Vec<u64>> = plan
            .counts
            .iter()
            .map(|r| r.iter().map(|&x| x as u64).collect())
            .collect();
        let w = compute_weights(&counts).unwrap();
        let got = table_of(&w, l, c);
        let mut max_err = 0.0f64;
        for (gr, or) in got.iter().zip(&oracle) {
            for (g, o) in gr.iter().zip(or) {
                max_err = max_err.max((g - o).abs());
            }
        }
        for (g, e) in got[0].iter().zip(&expected_first) {
            max_err = max_err.max((g - e).abs());
        }
        let mut mass_err = 0.0f64;
        for (row, wrow) in counts.iter().zip(&got) {
            let n_l: u64 = row.iter().sum();
            let mass: f64 = row.iter().zip(wrow).map(|(&n, w)| n as f64 * w).sum();
            mass_err = mass_err.max((mass - n_l as f64).abs());
        }
        ok &= max_err <= 1e-9 && mass_err <= 1e-9;
        notes.push(format!("{name} max|Δw|={max_err:.1e} mass={mass_err:.1e}"));
    }
    verdict(ok, notes.join("; "))
}

// ---------------------------------------------------------------------------
// criterion 2: additivity of exact explanations

fn criterion_2() -> Outcome {
    let vocab = small_vocab(20, 3);
    let mut worst = 0.0f64;
    for i in 0..200u64 {
        let p = random_model(&vocab, 1000 + i);
        let n = 1 + (i as usize % 12);
        let tokens = random_tokens(&vocab, n, i);
        let y = (i as usize) % vocab.n_classes();
        let e = shapley_exact(&p, &tokens, y).unwrap();
        let full = p.forward(&tokens).unwrap().probs[y];
        let base = p.forward(&vec![p.mask_id(); n]).unwrap().probs[y];
        let sum: f64 = e.values.iter().sum();
        worst = worst.max((sum + base - full).abs());
        worst = worst.max((e.base - base).abs()).max((e.prob - full).abs());
    }
    verdict(
        worst <= 1e-9,
        format!("200 models, n ≤ 12, max |Σ S + b − p| = {worst:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// criterion 3: exact engine against brute force, sampled against exact

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for perm in permutations(n - 1) {
        for pos in 0..=perm.len() {
            let mut p = perm.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

/// Average marginal contribution over every ordering, where absent tokens
/// are replaced by the mask token.
fn brute_force(p: &ModelParams, tokens: &[TokenId], y: usize) -> Vec<f64> {
    let n = tokens.len();
    let value = |present: &[bool]| {
        let input: Vec<TokenId> = (0..n)
            .map(|i| if present[i] { tokens[i] } else { p.mask_id() })
            .collect();
        p.forward(&input).unwrap().probs[y]
    };
    let orders = permutations(n);
    let mut totals = vec![0.0; n];
    for order in &orders {
        let mut present = vec![false; n];
        let mut prev = value(&present);
        for &i in order {
            present[i] = true;
            let cur = value(&present);
            totals[i] += cur - prev;
            prev = cur;
        }
    }
    totals.iter().map(|t| t / orders.len() as f64).collect()
}

fn criterion_3() -> Outcome {
    let vocab = small_vocab(20, 3);
    let mut worst_exact = 0.0f64;
    for i in 0..50u64 {
        let p = random_model(&vocab, 5000 + i);
        let n = 1 + (i as usize % 6);
        let tokens = random_tokens(&vocab, n, 500 + i);
        let y = (i as usize) % vocab.n_classes();
        let e = shapley_exact(&p, &tokens, y).unwrap();
        for (a, b) in e.values.iter().zip(brute_force(&p, &tokens, y)) {
            worst_exact = worst_exact.max((a - b).abs());
        }
    }
    let mut worst_sampled = 0.0f64;
    for i in 0..20u64 {
        let p = random_model(&vocab, 7000 + i);
        let n = 1 + (i as usize % 10);
        let tokens = random_tokens(&vocab, n, 700 + i);
        let y = (i as usize) % vocab.n_classes();
        let e = shapley_exact(&p, &tokens, y).unwrap();
        let s = shapley_sampled(&p, &tokens, y, 2000, i).unwrap();
        for (a, b) in e.values.iter().zip(&s.values) {
            worst_sampled = worst_sampled.max((a - b).abs());
        }
    }
    verdict(
        worst_exact <= 1e-9 && worst_sampled <= 0.02,
        format!("exact vs brute force max {worst_exact:.1e} (50, n ≤ 6); sampled vs exact max {worst_sampled:.4} (20, n ≤ 10)"),
    )
}

// ---------------------------------------------------------------------------
// criterion 4: paired sampler

fn cell_table(h: &BTreeMap<(usize, usize), usize>, l: usize, c: usize) -> Vec<Vec<usize>> {
    (0..l)
        .map(|i| (0..c).map(|j| *h.get(&(i, j)).unwrap_or(&0)).collect())
        .collect()
}

fn criterion_4() -> Outcome {
    let spec = CorpusSpec {
        fillers_per_language: 20,
        signals_per_language_class: 2,
        ..CorpusSpec::default()
    };
    let vocab = synthetic_vocab(&spec).unwrap();
    let pool = generate_examples(&vocab, &spec, 40, 11, "").unwrap();
    let joint = preset(Preset::XnliSkew, 2, 3).unwrap();
    let (bal, imbal, report) = sample_paired(&pool, &joint, 60, 5).unwrap();
    let imb = cell_table(&histogram(&imbal), 2, 3);
    let bal_t = cell_table(&histogram(&bal), 2, 3);
    let mut ok = imb == vec![vec![15, 10, 5], vec![5, 10, 15]];
    ok &= bal_t == vec![vec![10; 3]; 2];
    let shared = id_set(&bal).intersection(&id_set(&imbal)).count();
    ok &= report.overlap == 50 && shared == 50;

    // uniform marginals for both skewed presets at awkward sizes
    for (p, l, c, n) in [
        (Preset::XnliSkew, 2, 3, 6000),
        (Preset::AmazonSkew, 6, 5, 3000),
        (Preset::AmazonSkew, 2, 5, 1000),
    ] {
        let plan = plan_counts(&preset(p, l, c).unwrap(), n).unwrap();
        ok &= plan.counts.iter().all(|r| r.iter().sum::<usize>() == n / l);
        ok &= (0..c).all(|j| plan.counts.iter().map(|r| r[j]).sum::<usize>() == n / c);
    }

    let (b2, i2, _) = sample_paired(&pool, &joint, 60, 5).unwrap();
    ok &= id_set(&b2) == id_set(&bal) && id_set(&i2) == id_set(&imbal);
    verdict(
        ok,
        format!("imbalanced cells {imb:?}, overlap {shared}, marginals exact, repeatable"),
    )
}

// ---------------------------------------------------------------------------
// criterion 5: gradient check

fn criterion_5() -> Outcome {
    let spec = CorpusSpec {
        fillers_per_language: 5,
        signals_per_language_class: 2,
        min_tokens: 2,
        max_tokens: 7,
        ..CorpusSpec::default()
    };
    let vocab = synthetic_vocab(&spec).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for i in 0..20u64 {
        let mut r = rng::stream(i, "acceptance/grad");
        let data: Vec<Example> = generate_examples(&vocab, &spec, 3, 90 + i, "").unwrap();
        let batch: Vec<&Example> = data.iter().take(r.random_range(1..data.len())).collect();
        let mut params = random_model(&vocab, 300 + i);
        let weights = if i % 2 == 0 {
            Some(compute_weights(&[vec![1, 2, 3], vec![4, 2, 1]]).unwrap())
        } else {
            None
        };
        let lambda = if i % 3 == 0 {
            0.0
        } else {
            r.random_range(0.1..2.0)
        };
        let mask_len = r.random_range(1..8);
        let mut grad = vec![0.0; params.as_slice().len()];
        loss_and_grad(
            &params,
            &batch,
            weights.as_ref(),
            lambda,
            mask_len,
            &mut grad,
        )
        .unwrap();
        let h = 1e-5;
        for (k, &analytic) in grad.iter().enumerate() {
            let x = params.as_slice()[k];
            params.as_mut_slice()[k] = x + h;
            let up = loss(&params, &batch, weights.as_ref(), lambda, mask_len)
                .unwrap()
                .total;
            params.as_mut_slice()[k] = x - h;
            let down = loss(&params, &batch, weights.as_ref(), lambda, mask_len)
                .unwrap()
                .total;
            params.as_mut_slice()[k] = x;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    verdict(
        worst < 1e-4,
        format!("20 configs, {checked} coordinates, max relative error {worst:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// criterion 6: masked-input entropy term

fn criterion_6() -> Outcome {
    let vocab = small_vocab(10, 2);
    let mut p = random_model(&vocab, 1);
    p.out_w_mut().fill(0.0);
    p.out_b_mut().fill(0.0);
    let uniform = neg_entropy(&p.forward_all_mask().probs);
    // −1.0986 is −ln 3 printed to four decimals; the 1e-6 tolerance applies
    // to the exact value
    let mut ok = (uniform + 3f64.ln()).abs() <= 1e-6 && (uniform - (-1.0986)).abs() < 5e-5;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..200 {
        let mut q = random_model(&vocab, 40 + i);
        for x in q.out_b_mut() {
            *x *= 50.0 * i as f64;
        }
        let v = neg_entropy(&q.forward_all_mask().probs);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    ok &= lo >= -3f64.ln() - 1e-12 && hi <= 0.0;
    verdict(ok, format!("uniform output {uniform:.7} (−ln 3 = {:.7}); range over 200 models [{lo:.4}, {hi:.2e}]", -3f64.ln()))
}

// ---------------------------------------------------------------------------
// criteria 7-11: directional reproduction

fn count(seeds: &[SeedResult], f: impl Fn(&SeedResult) -> bool) -> usize {
    seeds.iter().filter(|s| f(s)).count()
}

fn arm(s: &SeedResult, a: Arm) -> &pbl_core::experiment::ArmResult {
    s.arm(a).expect("arm ran")
}

fn directional(seeds: &[SeedResult], elapsed: f64) -> Vec<Outcome> {
    let n = seeds.len();
    let need = 4;
    let in_time = elapsed < 15.0 * 60.0;

    let c7 = count(seeds, |s| {
        let (b, i, cw) = (
            arm(s, Arm::Balanced).eval.accuracy,
            arm(s, Arm::Imbalanced).eval.accuracy,
            arm(s, Arm::ImbalancedCw).eval.accuracy,
        );
        b > i && cw - i >= 0.5 * (b - i)
    });
    let acc = |a: Arm| seeds.iter().map(|s| arm(s, a).eval.accuracy).sum::<f64>() / n as f64;
    let o7 = verdict(
        c7 >= need && in_time,
        format!(
            "{c7}/{n} seeds; mean acc balanced {:.3}, imbalanced {:.3}, cw {:.3}; runtime {elapsed:.0}s",
            acc(Arm::Balanced),
            acc(Arm::Imbalanced),
            acc(Arm::ImbalancedCw)
        ),
    );

    let lid = |s: &SeedResult, a: Arm| {
        let r = arm(s, a);
        [
            r.probe_original.mean_accuracy,
            r.probe_synthetic
                .as_ref()
                .expect("synthetic probe")
                .mean_accuracy,
        ]
    };
    let c8 = count(seeds, |s| {
        let (b, i, cw) = (
            lid(s, Arm::Balanced),
            lid(s, Arm::Imbalanced),
            lid(s, Arm::ImbalancedCw),
        );
        (0..2).all(|k| i[k] >= b[k] + 0.05 && cw[k] < i[k])
    });
    let mean_lid = |a: Arm, k: usize| seeds.iter().map(|s| lid(s, a)[k]).sum::<f64>() / n as f64;
    let o8 = verdict(
        c8 >= need,
        format!(
            "{c8}/{n} seeds; mean LID original b/i/cw {:.3}/{:.3}/{:.3}, synthetic {:.3}/{:.3}/{:.3}",
            mean_lid(Arm::Balanced, 0),
            mean_lid(Arm::Imbalanced, 0),
            mean_lid(Arm::ImbalancedCw, 0),
            mean_lid(Arm::Balanced, 1),
            mean_lid(Arm::Imbalanced, 1),
            mean_lid(Arm::ImbalancedCw, 1)
        ),
    );

    let imb_pos = count(seeds, |s| arm(s, Arm::Imbalanced).prediction_skew > 0.0);
    let bal_pos = count(seeds, |s| arm(s, Arm::Balanced).prediction_skew > 0.0);
    let o9 = verdict(
        imb_pos >= need && bal_pos < need,
        format!("imbalanced arm positive in {imb_pos}/{n}; balanced arm positive in {bal_pos}/{n}"),
    );

    // labels whose share differs between languages
    let targets: Vec<(usize, usize, usize)> = seeds[0]
        .over_under
        .iter()
        .enumerate()
        .filter(|(_, (o, u))| o != u)
        .map(|(c, &(o, u))| (c, o, u))
        .collect();
    let signs = count(seeds, |s| {
        let r = s.shap("imbalanced").unwrap();
        targets.iter().all(|&(c, o, u)| {
            neutral_mean(r, o, c).unwrap() > 0.0 && neutral_mean(r, u, c).unwrap() < 0.0
        })
    });
    let shrink = count(seeds, |s| {
        let r = s.shap("imbalanced").unwrap();
        let cw = s.shap("imbalanced_cw").unwrap();
        targets.iter().all(|&(c, o, u)| {
            [o, u].iter().all(|&l| {
                neutral_mean(cw, l, c).unwrap().abs() <= 0.5 * neutral_mean(r, l, c).unwrap().abs()
            })
        })
    });
    let o10 = verdict(
        signs >= need && shrink >= need,
        format!(
            "target labels {:?}: sign pattern in {signs}/{n}, CW shrink ≥ 50% in {shrink}/{n}",
            targets.iter().map(|t| t.0).collect::<Vec<_>>()
        ),
    );

    let mean_db = |r: &pbl_core::explain::CumulativeDiffReport| {
        r.base_values
            .iter()
            .map(|b| b.mean_abs_base_diff)
            .sum::<f64>()
            / r.base_values.len() as f64
    };
    let ln_c = 3f64.ln();
    let c11 = count(seeds, |s| {
        let with = mean_db(s.shap("imbalanced_me").unwrap());
        let without = mean_db(s.shap("imbalanced").unwrap());
        let entropy_ok = [Arm::BalancedMe, Arm::ImbalancedMe]
            .iter()
            .all(|&a| (arm(s, a).mask_entropy - ln_c).abs() <= 0.05);
        with < without && entropy_ok
    });
    let db = |name: &str| {
        seeds
            .iter()
            .map(|s| mean_db(s.shap(name).unwrap()))
            .sum::<f64>()
            / n as f64
    };
    let o11 = verdict(
        c11 >= need,
        format!(
            "{c11}/{n} seeds; mean |Δb| λ=0 {:.4} vs λ>0 {:.4}",
            db("imbalanced"),
            db("imbalanced_me")
        ),
    );
    vec![o7, o8, o9, o10, o11]
}

fn directional_config(dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        mask_entropy_coeff: Some(1.0),
        seeds: vec![0, 1, 2, 3, 4],
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

// ---------------------------------------------------------------------------
// criterion 12: determinism

fn csv_hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, sha256_hex(&std::fs::read(&path).unwrap()));
            }
        }
    }
    out
}

fn criterion_12(tmp: &Path) -> Outcome {
    let config = |dir: &Path| ExperimentConfig {
        corpus: CorpusSource::Synthetic {
            spec: CorpusSpec {
                fillers_per_language: 30,
                signals_per_language_class: 3,
                ..CorpusSpec::default()
            },
            n_per_cell: None,
        },
        train_size: 300,
        val_size: 60,
        test_size: 60,
        mask_entropy_coeff: Some(1.0),
        explain: ExplainSettings {
            max_per_cell: Some(3),
            ..ExplainSettings::default()
        },
        probe: ProbeSettings {
            synthetic: Some(SyntheticProbeCorpus {
                n_per_language: 60,
                ..SyntheticProbeCorpus::default()
            }),
            ..ProbeSettings::default()
        },
        seeds: vec![7, 8],
        output_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    let (a, b) = (tmp.join("det-a"), tmp.join("det-b"));
    run_experiment(&config(&a)).unwrap();
    run_experiment(&config(&b)).unwrap();
    let (ha, hb) = (csv_hashes(&a), csv_hashes(&b));
    verdict(
        ha == hb && !ha.is_empty(),
        format!("{} CSV files compared", ha.len()),
    )
}

fn timed(
    n: usize,
    name: &'static str,
    f: &dyn Fn() -> Outcome,
    out: &mut Vec<(usize, &'static str, Outcome)>,
) {
    let t = Instant::now();
    let mut o = f();
    o.detail = format!("{} [{:.1}s]", o.detail, t.elapsed().as_secs_f64());
    println!(
        "{} criterion {n:>2} ({name}): {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    out.push((n, name, o));
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outcomes: Vec<(usize, &str, Outcome)> = Vec::new();
    timed(1, "class weights", &criterion_1, &mut outcomes);
    timed(2, "additivity", &criterion_2, &mut outcomes);
    timed(3, "Shapley oracles", &criterion_3, &mut outcomes);
    timed(4, "paired sampler", &criterion_4, &mut outcomes);
    timed(5, "gradient check", &criterion_5, &mut outcomes);
    timed(6, "masked entropy", &criterion_6, &mut outcomes);

    let started = Instant::now();
    let dir = tmp.path().join("directional");
    let summary = run_experiment(&directional_config(&dir)).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let names = [
        "accuracy ordering",
        "LID ordering",
        "prediction skew",
        "cumulative SHAP diff",
        "base values",
    ];
    if !summary.failures.is_empty() {
        for f in &summary.failures {
            println!("seed {} failed: {}", f.seed, f.error);
        }
    }
    for (k, o) in directional(&summary.seeds, elapsed).into_iter().enumerate() {
        println!(
            "{} criterion {:>2} ({}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            7 + k,
            names[k],
            o.detail
        );
        outcomes.push((7 + k, names[k], o));
    }
    timed(
        12,
        "determinism",
        &|| criterion_12(tmp.path()),
        &mut outcomes,
    );

    let failed: Vec<usize> = outcomes
        .iter()
        .filter(|(_, _, o)| !o.pass)
        .map(|(n, _, _)| *n)
        .collect();
    println!(
        "acceptance: {} of {} criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
