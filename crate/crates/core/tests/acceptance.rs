//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::{Duration, Instant};

use ndarray::Array2;
use pda_core::data::{generate_scenario, ScenarioDataset, ScenarioSpec};
use pda_core::engine::{self, alpha_schedule, fit, lr_schedule, sgd_step, TrainConfig, TrainState, Variant};
use pda_core::eval::{evaluate, median, EvalReport};
use pda_core::gradcheck;
use pda_core::labeling::{self, ConfidentTarget};
use pda_core::losses::{self, BatchRows, LossParts, TradeOff};
use pda_core::math::{self, DiagGaussianParams, SimplexVector};
use pda_core::networks::sample_latent;
use pda_core::tape::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const EXACT: f64 = 1e-9;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const FIT_BUDGET: Duration = Duration::from_secs(300);
const REQUIRED_GAIN: f64 = 0.10;
const REQUIRED_SEPARATED: usize = 4;

struct Verdict {
    id: u8,
    title: &'static str,
    passed: bool,
    detail: String,
}

impl Verdict {
    fn print(&self) {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        println!("{tag} [{}] {}: {}", self.id, self.title, self.detail);
    }
}

fn criterion_gradients() -> Verdict {
    let start = Instant::now();
    let results = gradcheck::run_suite();
    let elapsed = start.elapsed();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.rel_error).fold(0.0, f64::max);
    Verdict {
        id: 1,
        title: "gradient oracle suite",
        passed: failed.is_empty() && elapsed < GRADCHECK_BUDGET,
        detail: format!(
            "{} checks, {} failed {:?}, worst rel err {worst:.2e} (< {:e}), {:.2}s (< {}s)",
            results.len(),
            failed.len(),
            failed,
            gradcheck::TOLERANCE,
            elapsed.as_secs_f64(),
            GRADCHECK_BUDGET.as_secs()
        ),
    }
}

type Check = (&'static str, Box<dyn Fn() -> bool>);

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= EXACT
}

fn sv(v: &[f64]) -> SimplexVector {
    SimplexVector::new(v.to_vec()).unwrap()
}

fn scalar_loss(build: impl Fn(&mut Tape) -> pda_core::tape::Var) -> f64 {
    let mut tape = Tape::new();
    let v = build(&mut tape);
    tape.scalar(v)
}

fn analytic_checks() -> Vec<Check> {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    vec![
        (
            "softmax uniform",
            Box::new(|| {
                math::softmax(&[0.0; 3])
                    .unwrap()
                    .as_slice()
                    .iter()
                    .all(|&v| near(v, 1.0 / 3.0))
            }),
        ),
        (
            "softmax ln2",
            Box::new(|| {
                let p = math::softmax(&[2f64.ln(), 0.0]).unwrap();
                near(p.as_slice()[0], 2.0 / 3.0) && near(p.as_slice()[1], 1.0 / 3.0)
            }),
        ),
        (
            "log gaussian at mean",
            Box::new(move || {
                let g = DiagGaussianParams::new(vec![0.4, -2.0], vec![0.0, 0.0]).unwrap();
                near(math::log_gaussian_diag(&[0.4, -2.0], &g).unwrap(), -ln2pi)
            }),
        ),
        (
            "log gaussian term oracle",
            Box::new(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                (0..100).all(|_| {
                    let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
                    let m: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
                    let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let oracle: f64 = (0..4)
                        .map(|i| -0.5 * (ln2pi + lv[i] + (z[i] - m[i]).powi(2) / lv[i].exp()))
                        .sum();
                    let g = DiagGaussianParams::new(m, lv).unwrap();
                    (math::log_gaussian_diag(&z, &g).unwrap() - oracle).abs() <= EXACT * oracle.abs().max(1.0)
                })
            }),
        ),
        (
            "js examples",
            Box::new(|| {
                let (p, q) = (sv(&[0.5, 0.5]), sv(&[0.25, 0.75]));
                let kl = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * (x / y).log2()).sum() };
                let m = [0.375, 0.625];
                let oracle = 0.5 * kl(p.as_slice(), &m) + 0.5 * kl(q.as_slice(), &m);
                let pq = math::js_divergence(&p, &q).unwrap();
                near(pq, oracle)
                    && pq == math::js_divergence(&q, &p).unwrap()
                    && near(math::js_divergence(&sv(&[1.0, 0.0]), &sv(&[0.0, 1.0])).unwrap(), 1.0)
                    && math::js_divergence(&p, &p).unwrap() == 0.0
            }),
        ),
        (
            "entropy examples",
            Box::new(|| {
                math::entropy(&sv(&[0.0, 1.0])) == 0.0
                    && near(math::entropy(&SimplexVector::uniform(5).unwrap()), 5f64.ln())
            }),
        ),
        (
            "sample latent moments",
            Box::new(|| {
                let g = DiagGaussianParams::new(vec![0.7, -1.0], vec![0.5, -0.8]).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(2);
                let n = 100_000;
                let draws: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        let eps: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
                        sample_latent(&g, &eps).unwrap()
                    })
                    .collect();
                (0..2).all(|j| {
                    let var = g.logvar[j].exp();
                    let mean = draws.iter().map(|z| z[j]).sum::<f64>() / n as f64;
                    let s2 = draws.iter().map(|z| (z[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                    (mean - g.mean[j]).abs() < 3.0 * (var / n as f64).sqrt()
                        && (s2 - var).abs() < 3.0 * (2.0 * var * var / (n - 1) as f64).sqrt()
                })
            }),
        ),
        (
            "adv balanced",
            Box::new(|| {
                let rows = BatchRows {
                    source_labels: vec![0],
                    target_pseudo: vec![None],
                };
                let v = scalar_loss(|t| {
                    let l = t.leaf(Array2::zeros((2, 1)));
                    losses::adv_loss(t, l, &rows, &[1.0]).unwrap()
                });
                near(v, 2.0 * 2f64.ln())
            }),
        ),
        (
            "class uniform",
            Box::new(|| {
                let rows = BatchRows {
                    source_labels: vec![0, 3, 1],
                    target_pseudo: vec![None],
                };
                let v = scalar_loss(|t| {
                    let l = t.leaf(Array2::zeros((4, 4)));
                    losses::class_loss(t, l, &rows, &[1.0; 4]).unwrap()
                });
                near(v, 4f64.ln())
            }),
        ),
        (
            "em uniform",
            Box::new(|| {
                let rows = BatchRows {
                    source_labels: vec![0],
                    target_pseudo: vec![None, None],
                };
                let v = scalar_loss(|t| {
                    let l = t.leaf(Array2::zeros((3, 5)));
                    losses::em_loss(t, l, &rows).unwrap()
                });
                near(v, 5f64.ln())
            }),
        ),
        (
            "recon exact",
            Box::new(|| {
                let rows = BatchRows {
                    source_labels: vec![0],
                    target_pseudo: vec![None],
                };
                let x = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
                let v = scalar_loss(|t| {
                    let a = t.leaf(x.clone());
                    let b = t.leaf(x.clone());
                    losses::recon_loss(t, a, b, &rows, &[1.0]).unwrap()
                });
                v == 0.0
            }),
        ),
        (
            "total trade-off",
            Box::new(|| {
                let parts = LossParts {
                    class: 1.0,
                    adv: 2.0,
                    recon: 3.0,
                    cda: -0.5,
                    em: 0.4,
                };
                let b = losses::total_loss(&parts, TradeOff::OFFICE31).unwrap();
                let z = losses::total_loss(
                    &parts,
                    TradeOff {
                        alpha: 0.0,
                        beta: 0.0,
                        gamma: 0.0,
                    },
                )
                .unwrap();
                near(b.total, 1.0 + 2.0 + 0.8 * 2.5 + 0.1 * 0.4) && z.total == 1.0
            }),
        ),
        (
            "centers",
            Box::new(|| {
                let lat = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 3.0, 0.0]).unwrap();
                labeling::class_centers(lat.view(), &[0, 0], 1)
                    .unwrap()
                    .centers
                    .row(0)
                    .to_vec()
                    == vec![2.0, 0.0]
            }),
        ),
        (
            "threshold",
            Box::new(|| near(labeling::confidence_threshold(&[vec![9f64.ln(), 0.0]]).unwrap(), 0.9)),
        ),
        (
            "pseudo label ties",
            Box::new(|| {
                labeling::pseudo_label(&[1.0, 0.5, 0.5]).unwrap().1 == 0
                    && labeling::pseudo_label(&[0.6; 3]).unwrap().1 == 0
            }),
        ),
        (
            "class weights",
            Box::new(|| {
                let c = ConfidentTarget {
                    index: 0,
                    label: 1,
                    probs: sv(&[0.2, 0.8]),
                };
                let w = labeling::class_weights(&[c], 2);
                near(w[0], 0.25) && near(w[1], 1.0) && labeling::class_weights(&[], 3) == vec![1.0; 3]
            }),
        ),
        (
            "lr schedule",
            Box::new(|| {
                lr_schedule(0.0, 1e-3).unwrap() == 1e-3
                    && near(lr_schedule(1.0, 1e-3).unwrap(), 1e-3 * 11f64.powf(-0.75))
                    && lr_schedule(1.5, 1e-3).is_err()
            }),
        ),
        (
            "alpha schedule",
            Box::new(|| alpha_schedule(0.0) == 0.0 && near(alpha_schedule(1.0), 2.0 / (1.0 + (-10f64).exp()) - 1.0)),
        ),
        (
            "sgd recurrence",
            Box::new(|| {
                let g = [0.5, -1.5, 2.0];
                let mut p = Array2::from_elem((1, 1), 1.0);
                let mut v = vec![Array2::zeros((1, 1))];
                for gi in g {
                    sgd_step(&mut [&mut p], &[Array2::from_elem((1, 1), gi)], &mut v, &[0.1], 0.9).unwrap();
                }
                let (v1, v2) = (g[0], 0.9 * g[0] + g[1]);
                let v3 = 0.9 * v2 + g[2];
                near(p[[0, 0]], 1.0 - 0.1 * (v1 + v2 + v3))
            }),
        ),
        (
            "zero-shift data means",
            Box::new(|| {
                let spec = ScenarioSpec {
                    rotation: 0.0,
                    translation: vec![0.0, 0.0],
                    ..ScenarioSpec::default()
                };
                let ds = generate_scenario(&spec).unwrap();
                let truth = &ds.hidden.as_ref().unwrap().labels;
                let se = (1.0 / 200.0f64 + 1.0 / 100.0).sqrt() * spec.blob_std;
                (0..3).all(|c| {
                    (0..2).all(|j| {
                        let mean = |x: &Array2<f64>, y: &[usize]| {
                            let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
                            idx.iter().map(|&i| x[[i, j]]).sum::<f64>() / idx.len() as f64
                        };
                        (mean(&ds.train.source_x, &ds.train.source_y) - mean(&ds.train.target_x, truth)).abs()
                            < 3.0 * se
                    })
                })
            }),
        ),
        (
            "uniform predictor accuracy",
            Box::new(|| {
                let truth: Vec<usize> = (0..300).map(|i| i / 100).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let preds: Vec<usize> = truth.iter().map(|_| rng.random_range(0..5)).collect();
                let r = EvalReport::from_predictions(&preds, &truth, 5, 3, vec![1.0; 5], String::new(), 0);
                (r.accuracy - 0.2).abs() < 3.0 * (0.16f64 / 300.0).sqrt()
            }),
        ),
    ]
}

fn criterion_analytic() -> Verdict {
    let checks = analytic_checks();
    let failed: Vec<&str> = checks.iter().filter(|(_, c)| !c()).map(|(n, _)| *n).collect();
    Verdict {
        id: 2,
        title: "analytic unit values",
        passed: failed.is_empty(),
        detail: format!("{} checks, failed {:?}", checks.len(), failed),
    }
}

struct Run {
    report: EvalReport,
    elapsed: Duration,
}

fn run(config: &TrainConfig, ds: &ScenarioDataset) -> Run {
    let start = Instant::now();
    let state = fit(config, &ds.train).expect("training run");
    let elapsed = start.elapsed();
    Run {
        report: evaluate(&state, ds).expect("evaluation"),
        elapsed,
    }
}

fn runs(variant: Variant, ds: &ScenarioDataset) -> Vec<Run> {
    SEEDS
        .iter()
        .map(|&seed| {
            run(
                &variant.apply(&TrainConfig {
                    seed,
                    ..TrainConfig::default()
                }),
                ds,
            )
        })
        .collect()
}

fn med(runs: &[Run]) -> f64 {
    median(&runs.iter().map(|r| r.report.accuracy).collect::<Vec<_>>())
}

fn accs(runs: &[Run]) -> String {
    let v: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.report.accuracy)).collect();
    format!("[{}]", v.join(", "))
}

fn criterion_separation(full: &[Run], ds: &ScenarioDataset) -> Verdict {
    let shared = ds.target_classes;
    let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let separated = full
        .iter()
        .filter(|r| {
            let w = &r.report.weights;
            mean(&w[shared..]) < mean(&w[..shared])
        })
        .count();
    let slowest = full.iter().map(|r| r.elapsed).max().unwrap_or_default();
    Verdict {
        id: 3,
        title: "weight separation",
        passed: separated >= REQUIRED_SEPARATED && slowest < FIT_BUDGET,
        detail: format!(
            "outlier mean W < shared mean W in {separated}/5 seeds (need {REQUIRED_SEPARATED}), slowest fit {:.1}s (< {}s)",
            slowest.as_secs_f64(),
            FIT_BUDGET.as_secs()
        ),
    }
}

fn criterion_gain(full: &[Run], source_only: &[Run]) -> Verdict {
    let (f, s) = (med(full), med(source_only));
    Verdict {
        id: 4,
        title: "adaptation gain",
        passed: f >= s + REQUIRED_GAIN,
        detail: format!(
            "full median {f:.4} {} vs source-only median {s:.4} {}, gain {:+.4} (need >= {REQUIRED_GAIN})",
            accs(full),
            accs(source_only),
            f - s
        ),
    }
}

fn criterion_ablation(full: &[Run], ablated: &[(Variant, Vec<Run>)]) -> Verdict {
    let f = med(full);
    let medians: Vec<(Variant, f64)> = ablated.iter().map(|(v, r)| (*v, med(r))).collect();
    let all_below = medians.iter().all(|&(_, m)| m <= f);
    let largest = medians
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(v, _)| v);
    let adv_median = medians.iter().find(|(v, _)| *v == Variant::NoAdv).map(|(_, m)| *m);
    let adv_largest = adv_median.is_some_and(|a| medians.iter().all(|&(_, m)| a <= m));
    let listing: Vec<String> = medians
        .iter()
        .zip(ablated)
        .map(|((v, m), (_, r))| format!("{} {m:.4} {}", v.name(), accs(r)))
        .collect();
    Verdict {
        id: 5,
        title: "ablation direction",
        passed: all_below && adv_largest,
        detail: format!(
            "full {f:.4}; {}; every ablation <= full: {all_below}; largest drop: {}",
            listing.join("; "),
            largest.map_or("none", |v| v.name())
        ),
    }
}

fn criterion_determinism(ds: &ScenarioDataset) -> Verdict {
    let config = TrainConfig::default();
    let a = fit(&config, &ds.train).expect("first run");
    let b = fit(&config, &ds.train).expect("second run");
    let ra = evaluate(&a, ds).expect("first report").to_text();
    let rb = evaluate(&b, ds).expect("second report").to_text();
    let same_history = a.history.len() == b.history.len()
        && a.history.iter().zip(&b.history).all(|(x, y)| {
            let bits = |r: &engine::StepRecord| {
                let l = r.losses;
                [
                    r.lr,
                    r.alpha,
                    l.class_loss,
                    l.adv_loss,
                    l.recon_loss,
                    l.cda_loss,
                    l.em_loss,
                    l.total,
                ]
                .map(f64::to_bits)
            };
            x.step == y.step && bits(x) == bits(y)
        });
    Verdict {
        id: 6,
        title: "determinism",
        passed: same_history && ra == rb && a == b,
        detail: format!(
            "{} steps; histories bit-identical: {same_history}; reports identical: {}; states identical: {}",
            a.history.len(),
            ra == rb,
            a == b
        ),
    }
}

fn criterion_labeling() -> Verdict {
    let spec = ScenarioSpec {
        radius: 8.0,
        blob_std: 0.5,
        rotation: 0.0,
        translation: vec![0.0, 0.0],
        ..ScenarioSpec::default()
    };
    let ds = generate_scenario(&spec).expect("scenario");
    let state: TrainState = fit(&TrainConfig::default(), &ds.train).expect("training run");
    let truth = &ds.hidden.as_ref().expect("labels").labels;
    let lab = &state.labeling;
    let correct = lab.target_labels.iter().zip(truth).filter(|(p, t)| p == t).count();
    let confident_correct = lab.confident.iter().filter(|c| c.label == truth[c.index]).count();
    let k = ds.train.num_classes as f64;
    let t_ok = lab.threshold >= 1.0 / k && lab.threshold <= 1.0;
    let max_w = lab.weights.iter().copied().fold(0.0, f64::max);
    let passed = correct == truth.len() && confident_correct == lab.confident.len() && t_ok && max_w == 1.0;
    Verdict {
        id: 7,
        title: "labeling pipeline exactness",
        passed,
        detail: format!(
            "pseudo-labels {correct}/{} correct, confident set {confident_correct}/{} correct, T = {:.4} in [{:.2}, 1]: {t_ok}, max W = {max_w}",
            truth.len(),
            lab.confident.len(),
            lab.threshold,
            1.0 / k
        ),
    }
}

fn main() {
    let mut verdicts = Vec::new();
    let mut report = |v: Verdict| {
        v.print();
        verdicts.push(v.passed);
    };
    report(criterion_gradients());
    report(criterion_analytic());

    let ds = generate_scenario(&ScenarioSpec::default()).expect("default scenario");
    let full = runs(Variant::Full, &ds);
    report(criterion_separation(&full, &ds));
    let source_only = runs(Variant::SourceOnly, &ds);
    report(criterion_gain(&full, &source_only));
    let ablated: Vec<(Variant, Vec<Run>)> = [Variant::NoAst, Variant::NoAdv, Variant::NoCdl]
        .into_iter()
        .map(|v| (v, runs(v, &ds)))
        .collect();
    report(criterion_ablation(&full, &ablated));
    report(criterion_determinism(&ds));
    report(criterion_labeling());

    let failed = verdicts.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
