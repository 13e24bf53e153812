//! Acceptance suite: runs every criterion and prints one PASS/FAIL line for
//! each, followed by a summary. The process exits with success unless
//! `ACCEPTANCE_STRICT=1` is set, in which case any FAIL is fatal.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use distill_lab::data::{build_source, sample_corpus, MarkovSource, SourceSpec, GAP_TOKEN};
use distill_lab::model::{ConditionalModel, ContextKey, GradAccumulator, TabularLM, Vocab};
use distill_lab::numerics::{entropy, k1_mc, lab_rng, CategoricalDist};
use distill_lab::objectives::{hpd_weights, HpdVariant, ObjectiveTag};
use distill_lab::training::{
    distill_offpolicy, distill_offpolicy_from, distill_onpolicy_opd, MetricsRow, OpdRewardMode,
    TrainConfig,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    Outcome { name, pass, detail }
}

fn dist(p: &[f64]) -> CategoricalDist {
    CategoricalDist::from_probs(p.to_vec()).unwrap()
}

fn random_simplex(rng: &mut impl Rng, v: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..v).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// log-softmax evaluated directly, independent of the library.
fn oracle_log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

fn criterion_01_gradient_exactness() -> Outcome {
    let mut rng = lab_rng(2024, 0);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let v = rng.random_range(2..=8);
        let order = rng.random_range(1..=2);
        let mut model = TabularLM::new(order, Vocab::with_size(v).unwrap()).unwrap();
        let contexts = ContextKey::enumerate(order, v);
        let ctx = contexts[rng.random_range(0..contexts.len())].clone();
        let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
        model.set_row(ctx.clone(), logits.clone()).unwrap();
        let token = rng.random_range(0..v);
        let weight = rng.random_range(-2.0..2.0);

        let mut acc = GradAccumulator::new();
        acc.accumulate_token_grad(&model, &ctx, token, weight)
            .unwrap();
        let analytic = acc.raw(&ctx).unwrap();
        // descent direction of -w ln q(token) by central differences
        for i in 0..v {
            let loss = |delta: f64| {
                let mut z = logits.clone();
                z[i] += delta;
                -weight * oracle_log_softmax(&z)[token]
            };
            let numeric = -(loss(eps) - loss(-eps)) / (2.0 * eps);
            let scale = analytic[i].abs().max(numeric.abs());
            if scale > 0.0 {
                worst = worst.max((analytic[i] - numeric).abs() / scale);
            }
        }
    }
    outcome(
        "gradient exactness",
        worst <= 1e-5,
        format!("200 instances, max relative error {worst:.2e} (limit 1e-5)"),
    )
}

fn criterion_02_hpd_weight_suite() -> Outcome {
    let mut failures = Vec::new();
    let p = dist(&[0.8, 0.2]);
    let cases = [
        (dist(&[0.5, 0.5]), 1.835002, -0.458146),
        (dist(&[0.9, 0.1]), -0.106005, 0.0),
        (p.clone(), 0.8, 0.0),
    ];
    for (q, w_star, w_sampled) in &cases {
        let w = hpd_weights(&p, q, 0, 1, HpdVariant::Full).unwrap();
        if (w.w_star - w_star).abs() > 1e-6 || (w.w_sampled - w_sampled).abs() > 1e-6 {
            failures.push(format!(
                "worked case q={:?}: got ({}, {})",
                q.probs(),
                w.w_star,
                w.w_sampled
            ));
        }
    }

    let mut rng = lab_rng(7, 0);
    for _ in 0..10_000 {
        let v = rng.random_range(2..=8);
        let (pv, qv) = (random_simplex(&mut rng, v), random_simplex(&mut rng, v));
        let (p, q) = (dist(&pv), dist(&qv));
        let expert = rng.random_range(0..v);
        let sampled = rng.random_range(0..v);
        let k1 = qv[expert] * (pv[expert].ln() - qv[expert].ln());
        let k1p = qv[sampled] * (pv[sampled].ln() - qv[sampled].ln());
        let full = hpd_weights(&p, &q, expert, sampled, HpdVariant::Full).unwrap();
        let no_sample = hpd_weights(&p, &q, expert, sampled, HpdVariant::NoSample).unwrap();
        let no_reinforce = hpd_weights(&p, &q, expert, sampled, HpdVariant::NoReinforce).unwrap();

        let ps = pv[expert];
        let branches = [
            (k1 > 0.0 && k1p < 0.0, 2.0 * ps + k1),
            (k1 < 0.0, k1),
            (!(k1 > 0.0 && k1p < 0.0) && k1 >= 0.0, ps + k1),
        ];
        let fired: Vec<_> = branches.iter().filter(|b| b.0).collect();
        if fired.len() != 1 {
            failures.push(format!("{} branches fired", fired.len()));
            continue;
        }
        if (full.w_star - fired[0].1).abs() > 1e-12 || (full.k1 - k1).abs() > 1e-12 {
            failures.push(format!("w_star {} vs {}", full.w_star, fired[0].1));
        }
        if branches[0].0 && sampled == expert {
            failures.push("doubling with sampled = expert".into());
        }
        let want_sampled = if sampled != expert && k1p < 0.0 {
            k1p
        } else {
            0.0
        };
        if (full.w_sampled - want_sampled).abs() > 1e-12 {
            failures.push("w_sampled rule".into());
        }
        if (k1 > 0.0) != (qv[expert] < pv[expert]) {
            failures.push("k1 sign".into());
        }
        if no_reinforce.w_star != (if k1 < 0.0 { k1 } else { ps + k1 }) {
            failures.push("no_reinforce rule".into());
        }
        if no_sample.w_sampled != 0.0 || no_sample.w_star != (if k1 > 0.0 { ps + k1 } else { k1 }) {
            failures.push("no_sample rule".into());
        }
        if k1p >= 0.0 && k1 != 0.0 && (no_sample.w_star != full.w_star || full.w_sampled != 0.0) {
            failures.push("no_sample differs from hpd without a suppressed sample".into());
        }
    }
    outcome(
        "HPD weight suite",
        failures.is_empty(),
        format!(
            "3 worked cases + 10^4 random draws, {} violations {:?}",
            failures.len(),
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn criterion_03_k1_unbiased() -> Outcome {
    let mut rng = lab_rng(11, 0);
    let n = 100_000;
    let mut bad = Vec::new();
    let mut worst_z: f64 = 0.0;
    for i in 0..20 {
        let v = [2, 4, 8][i % 3];
        let (pv, qv) = (random_simplex(&mut rng, v), random_simplex(&mut rng, v));
        let report = k1_mc(&dist(&pv), &dist(&qv), n, &mut rng).unwrap();
        let exact = oracle_kl(&qv, &pv);
        let z = (report.mc_mean - exact).abs() / report.mc_stderr;
        worst_z = worst_z.max(z);
        let event: f64 = (0..v).filter(|&a| qv[a] < pv[a]).map(|a| qv[a]).sum();
        let sigma = (event * (1.0 - event) / n as f64).sqrt();
        let frac_ok = (report.negative_fraction - event).abs() <= 3.0 * sigma;
        if z > 3.0 || !frac_ok {
            bad.push(i);
        }
    }
    outcome(
        "K1 unbiasedness",
        bad.is_empty(),
        format!("20 pairs at 10^5 samples, worst |bias|/se {worst_z:.2}, failing pairs {bad:?}"),
    )
}

fn constant_source(p: &[f64]) -> MarkovSource {
    let v = p.len();
    let rows: BTreeMap<_, _> = ContextKey::enumerate(1, v)
        .into_iter()
        .map(|c| (c, dist(p)))
        .collect();
    MarkovSource::from_rows(1, Vocab::with_size(v).unwrap(), rows).unwrap()
}

fn criterion_04_opd_direction() -> Outcome {
    let p = [0.6, 0.25, 0.1, 0.05];
    let teacher = constant_source(&p);
    let student = TabularLM::new(1, Vocab::with_size(4).unwrap()).unwrap();
    let bos = ContextKey::from_prefix(&[], 1, 4);
    let cfg = TrainConfig {
        steps: 1,
        batch_size: 100_000,
        lr: 1.0,
        opd_reward_mode: OpdRewardMode::Trajectory,
        eval_rollouts: 1,
        num_tasks: 0,
        ..TrainConfig::new(ObjectiveTag::OpdK1, 5)
    };
    let (after, _) = distill_onpolicy_opd(&cfg, &teacher, student, &[vec![]], 1).unwrap();
    let empirical = after.logits(&bos).unwrap().to_vec();

    // direct differentiation of KL(q‖p) with q = softmax(z) at z = 0
    let z0 = [0.0; 4];
    let q: Vec<f64> = oracle_log_softmax(&z0).iter().map(|l| l.exp()).collect();
    let kl = oracle_kl(&q, &p);
    let exact: Vec<f64> = (0..4).map(|v| -q[v] * ((q[v] / p[v]).ln() - kl)).collect();
    // finite-difference cross-check of the oracle
    for v in 0..4 {
        let kl_at = |d: f64| {
            let mut z = z0;
            z[v] += d;
            let qz: Vec<f64> = oracle_log_softmax(&z).iter().map(|l| l.exp()).collect();
            oracle_kl(&qz, &p)
        };
        let fd = -(kl_at(1e-6) - kl_at(-1e-6)) / 2e-6;
        assert!(
            (fd - exact[v]).abs() < 1e-8,
            "oracle disagrees with finite differences"
        );
    }
    let rel: Vec<f64> = (0..4)
        .map(|v| (empirical[v] - exact[v]).abs() / exact[v].abs())
        .collect();
    let worst = rel.iter().cloned().fold(0.0, f64::max);
    outcome(
        "OPD trajectory-mode direction",
        worst < 0.05,
        format!("10^5 rollouts, per-coordinate relative errors {rel:.4?} (limit 0.05)"),
    )
}

fn criterion_05_fkld_fixed_point() -> Outcome {
    let results: Vec<(u64, f64)> = SEEDS
        .par_iter()
        .map(|&seed| {
            let source = build_source(&SourceSpec::RandomDirichlet {
                vocab_size: 8,
                order: 1,
                seed,
                concentration: 1.0,
            })
            .unwrap();
            let corpus = sample_corpus(&source, 2000, 64, seed).unwrap();
            let cfg = TrainConfig {
                lr: 0.5,
                ..TrainConfig::new(ObjectiveTag::FkldDense, seed)
            };
            let student = TabularLM::new(1, Vocab::with_size(8).unwrap()).unwrap();
            let (_, rows) = distill_offpolicy(&cfg, &source, &corpus, student).unwrap();
            (
                seed,
                rows.iter().map(|r| r.kl_fwd).fold(f64::INFINITY, f64::min),
            )
        })
        .collect();
    let pass = results.iter().all(|r| r.1 < 1e-3);
    let detail: Vec<String> = results
        .iter()
        .map(|(s, kl)| format!("seed {s}: {kl:.3e}"))
        .collect();
    outcome(
        "FKLD fixed point",
        pass,
        format!(
            "best mean kl_fwd within 2000 steps (limit 1e-3): {}",
            detail.join(", ")
        ),
    )
}

/// The capacity-gap setup: order-2 bimodal source as oracle teacher, order-1
/// student starting from uniform rows, ground-truth corpus.
struct GapSetup {
    source: MarkovSource,
    corpus: distill_lab::data::Corpus,
}

impl GapSetup {
    fn new(seed: u64) -> Self {
        let source = build_source(&SourceSpec::BimodalGap {
            vocab_size: 8,
            noise: 0.05,
        })
        .unwrap();
        let corpus = sample_corpus(&source, 2000, 64, seed).unwrap();
        Self { source, corpus }
    }

    fn student() -> TabularLM {
        TabularLM::new(1, Vocab::with_size(8).unwrap()).unwrap()
    }

    fn train(&self, tag: ObjectiveTag, seed: u64) -> (TabularLM, Vec<MetricsRow>) {
        distill_offpolicy(
            &TrainConfig::new(tag, seed),
            &self.source,
            &self.corpus,
            Self::student(),
        )
        .unwrap()
    }
}

fn ambiguous_entropy(m: &TabularLM) -> f64 {
    entropy(&m.next_dist(&[GAP_TOKEN]).unwrap())
}

fn criterion_06_mode_covering_vs_seeking() -> Outcome {
    const CHUNK: usize = 2000;
    const MAX_CHUNKS: usize = 25;
    const TOL: f64 = 1e-4;
    const MARGIN: f64 = 0.05;
    let results: Vec<(u64, f64, f64, bool)> = SEEDS
        .par_iter()
        .map(|&seed| {
            let setup = GapSetup::new(seed);
            let run = |tag| {
                let cfg = TrainConfig {
                    steps: CHUNK,
                    eval_every: CHUNK,
                    ..TrainConfig::new(tag, seed)
                };
                let mut student = GapSetup::student();
                let mut h = ambiguous_entropy(&student);
                for chunk in 0..MAX_CHUNKS {
                    let (next, _) = distill_offpolicy_from(
                        &cfg,
                        &setup.source,
                        &setup.corpus,
                        student,
                        chunk * CHUNK,
                    )
                    .unwrap();
                    student = next;
                    let h_next = ambiguous_entropy(&student);
                    if (h_next - h).abs() < TOL {
                        return (h_next, true);
                    }
                    h = h_next;
                }
                (h, false)
            };
            let (h_fkld, c1) = run(ObjectiveTag::FkldDense);
            let (h_rkld, c2) = run(ObjectiveTag::RkldOff);
            (seed, h_fkld, h_rkld, c1 && c2)
        })
        .collect();
    let wins = results.iter().filter(|r| r.1 > r.2 + MARGIN).count();
    let detail: Vec<String> = results
        .iter()
        .map(|(s, f, r, c)| {
            format!(
                "seed {s}: fkld {f:.3} rkld {r:.3}{}",
                if *c { "" } else { " (not converged)" }
            )
        })
        .collect();
    outcome(
        "mode covering vs mode seeking",
        wins >= 4,
        format!(
            "{wins}/5 seeds with H(fkld_dense) > H(rkld_off) + {MARGIN} at the ambiguous state; {}",
            detail.join("; ")
        ),
    )
}

fn last(rows: &[MetricsRow]) -> &MetricsRow {
    rows.last().unwrap()
}

/// Final rows of 2000-step runs on the capacity-gap setup, per seed.
fn gap_runs(tags: &[ObjectiveTag]) -> Vec<(u64, Vec<(TabularLM, MetricsRow)>)> {
    SEEDS
        .par_iter()
        .map(|&seed| {
            let setup = GapSetup::new(seed);
            let runs = tags
                .iter()
                .map(|&t| {
                    let (m, rows) = setup.train(t, seed);
                    (m, last(&rows).clone())
                })
                .collect();
            (seed, runs)
        })
        .collect()
}

fn criterion_07_entropy_collapse_and_kl_progress() -> Outcome {
    let runs = gap_runs(&[ObjectiveTag::Sft, ObjectiveTag::Hpd]);
    let mut entropy_wins = 0;
    let mut kl_wins = 0;
    let mut detail = Vec::new();
    for (seed, r) in &runs {
        let (sft, hpd) = (&r[0].1, &r[1].1);
        let (hs, hh) = (sft.train_entropy.unwrap(), hpd.train_entropy.unwrap());
        entropy_wins += (hs < hh) as usize;
        kl_wins += (hpd.kl_rev < sft.kl_rev) as usize;
        detail.push(format!(
            "seed {seed}: H sft {hs:.4} hpd {hh:.4}, kl_rev sft {:.4} hpd {:.4}",
            sft.kl_rev, hpd.kl_rev
        ));
    }
    let pass = entropy_wins >= 4 && kl_wins >= 4;
    outcome("entropy collapse and KL progress",
        pass,
        format!("(a) sft entropy below hpd in {entropy_wins}/5, (b) hpd kl_rev below sft in {kl_wins}/5; {}", detail.join("; ")),
    )
}

fn criterion_08_ablation_ordering() -> Outcome {
    let runs = gap_runs(&[
        ObjectiveTag::Hpd,
        ObjectiveTag::HpdNoReinforce,
        ObjectiveTag::HpdNoSample,
    ]);
    let mut kl_wins = 0;
    let mut acc_wins = 0;
    let mut detail = Vec::new();
    for (seed, r) in &runs {
        let (hpd, no_reinforce, no_sample) = (&r[0].1, &r[1].1, &r[2].1);
        kl_wins += (hpd.kl_rev <= no_reinforce.kl_rev) as usize;
        acc_wins += (no_sample.accuracy.unwrap() <= hpd.accuracy.unwrap()) as usize;
        detail.push(format!(
            "seed {seed}: kl_rev hpd {:.4} no_reinforce {:.4}, accuracy hpd {:.3} no_sample {:.3}",
            hpd.kl_rev,
            no_reinforce.kl_rev,
            hpd.accuracy.unwrap(),
            no_sample.accuracy.unwrap()
        ));
    }
    outcome("ablation ordering",
        kl_wins >= 4 && acc_wins >= 4,
        format!("kl_rev(hpd) <= kl_rev(no_reinforce) in {kl_wins}/5, acc(no_sample) <= acc(hpd) in {acc_wins}/5; {}", detail.join("; ")),
    )
}

fn criterion_09_opd_initialization() -> Outcome {
    let results: Vec<(u64, f64, f64)> = SEEDS
        .par_iter()
        .map(|&seed| {
            let setup = GapSetup::new(seed);
            let opd = TrainConfig {
                steps: 500,
                ..TrainConfig::new(ObjectiveTag::OpdK1, seed)
            };
            let follow = |init: TabularLM| {
                let (_, rows) =
                    distill_onpolicy_opd(&opd, &setup.source, init, &[vec![]], opd.horizon)
                        .unwrap();
                last(&rows).kl_rev
            };
            let (from_sft, _) = setup.train(ObjectiveTag::Sft, seed);
            let (from_hpd, _) = setup.train(ObjectiveTag::Hpd, seed);
            (seed, follow(from_hpd), follow(from_sft))
        })
        .collect();
    let wins = results.iter().filter(|r| r.1 <= r.2).count();
    let detail: Vec<String> = results
        .iter()
        .map(|(s, h, f)| format!("seed {s}: from hpd {h:.4}, from sft {f:.4}"))
        .collect();
    outcome(
        "OPD initialization effect",
        wins >= 4,
        format!(
            "final kl_rev after 500 OPD steps, hpd start <= sft start in {wins}/5; {}",
            detail.join("; ")
        ),
    )
}

fn run_cli(dir: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_distill-lab"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    assert!(
        status.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&status.stderr)
    )
}

fn criterion_10_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"seed": 7, "out_dir": "out", "train": {"objective": "hpd", "steps": 300}, "corpus": {"num_seqs": 200}}"#,
    )
    .unwrap();
    let commands: [(&[&str], &[&str]); 6] = [
        (&["gen-source"], &["source.json"]),
        (&["gen-corpus"], &["corpus.txt"]),
        (&["train-teacher"], &["teacher.ckpt.json"]),
        (&["distill"], &["metrics.csv", "student.ckpt.json"]),
        (&["eval"], &["audit.csv", "entropy_profile.csv"]),
        (
            &[
                "opd",
                "--set",
                "train.objective=opd_k1",
                "--set",
                "train.steps=50",
            ],
            &["metrics.csv", "student.ckpt.json"],
        ),
    ];
    let mut mismatches = Vec::new();
    let mut compared = 0;
    for (args, outputs) in commands {
        let mut full = args.to_vec();
        full.extend(["--config", "run.json"]);
        let mut snapshots = Vec::new();
        for _ in 0..2 {
            run_cli(dir.path(), &full);
            let bytes: Vec<Vec<u8>> = outputs
                .iter()
                .map(|f| std::fs::read(dir.path().join("out").join(f)).unwrap())
                .collect();
            snapshots.push(bytes);
        }
        for (i, f) in outputs.iter().enumerate() {
            compared += 1;
            if snapshots[0][i] != snapshots[1][i] {
                mismatches.push(format!("{} {f}", args[0]));
            }
        }
    }
    outcome(
        "determinism",
        mismatches.is_empty(),
        format!("{compared} files from 6 commands run twice, mismatches {mismatches:?}"),
    )
}

type Criterion = (u32, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, Duration::from_secs(10), criterion_01_gradient_exactness),
        (2, Duration::from_secs(5), criterion_02_hpd_weight_suite),
        (3, Duration::from_secs(30), criterion_03_k1_unbiased),
        (4, Duration::from_secs(60), criterion_04_opd_direction),
        (5, Duration::from_secs(30), criterion_05_fkld_fixed_point),
        (
            6,
            Duration::from_secs(120),
            criterion_06_mode_covering_vs_seeking,
        ),
        (
            7,
            Duration::from_secs(300),
            criterion_07_entropy_collapse_and_kl_progress,
        ),
        (8, Duration::from_secs(300), criterion_08_ablation_ordering),
        (9, Duration::from_secs(300), criterion_09_opd_initialization),
        (10, Duration::from_secs(300), criterion_10_determinism),
    ];
    let mut passed = 0;
    for (number, limit, run) in criteria {
        let started = Instant::now();
        let result = std::panic::catch_unwind(run);
        let elapsed = started.elapsed();
        let (name, pass, detail) = match result {
            Ok(o) => (o.name, o.pass, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                ("(panicked)", false, msg)
            }
        };
        let in_time = elapsed <= limit;
        let ok = pass && in_time;
        passed += ok as usize;
        let verdict = if ok { "PASS" } else { "FAIL" };
        let timing = if in_time { "" } else { " [over time limit]" };
        println!(
            "criterion {number:>2} [{verdict}] {name} ({:.1}s of {}s{timing}): {detail}",
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
    }
    println!("acceptance: {passed}/10 criteria pass");
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && passed < 10 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
