//! Acceptance criteria. Every test writes one `[PASS]`/`[FAIL]` line straight
//! to stdout (bypassing the test harness capture) and then asserts.

use std::collections::BTreeSet;
use std::io::Write;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sotta_core::adapt::{mean_std, Flags, Method, StreamResult};
use sotta_core::harness::csv::{to_csv_string, CsvRow};
use sotta_core::harness::{gradcheck_suite, pretrain, run_methods, RunConfig};
use sotta_core::memory::{EvictionPolicy, InsertOutcome, MemoryBank};
use sotta_core::network::{BnBatchStats, Network, NetworkSpec};
use sotta_core::optim::{em_step, epsilon_hat, esm_step, AdamState, EsmConfig};
use sotta_core::{Grads, Scenario, Tensor};

const SEEDS: [u64; 3] = [0, 1, 2];

fn verdict(id: u32, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "[{tag}] criterion {id:>2}: {detail}");
    let _ = out.flush();
    assert!(pass, "criterion {id}: {detail}");
}

/// Shared benchmark: one pretrained source model, every Noise-scenario method
/// and the Benign-scenario EM/SoTTA pair on seeds 0, 1, 2.
struct Bench {
    cfg: RunConfig,
    noise: Vec<StreamResult>,
    benign: Vec<StreamResult>,
    /// Pretraining plus the Source/EM/SoTTA noise runs.
    ordering_time: Duration,
}

fn noise_methods() -> Vec<Method> {
    let mut m = vec![Method::Source];
    m.extend(Method::ablations());
    m
}

fn bench() -> &'static Bench {
    static BENCH: OnceLock<Bench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let cfg = RunConfig::default();
        let start = Instant::now();
        let (net, _) = pretrain(&cfg).expect("pretraining");
        let pretrain_time = start.elapsed();
        let mut ordering_time = pretrain_time;
        let mut noise = Vec::new();
        let mut benign = Vec::new();
        for seed in SEEDS {
            let t = Instant::now();
            noise.extend(
                run_methods(
                    &cfg,
                    &net,
                    Scenario::Noise,
                    &[Method::Source, Method::EM, Method::SOTTA],
                    seed,
                )
                .expect("noise runs"),
            );
            ordering_time += t.elapsed();
            let rest: Vec<Method> = noise_methods()
                .into_iter()
                .filter(|m| *m != Method::Source && *m != Method::EM && *m != Method::SOTTA)
                .collect();
            noise.extend(
                run_methods(&cfg, &net, Scenario::Noise, &rest, seed).expect("ablation runs"),
            );
            benign.extend(
                run_methods(
                    &cfg,
                    &net,
                    Scenario::Benign,
                    &[Method::EM, Method::SOTTA],
                    seed,
                )
                .expect("benign runs"),
            );
        }
        Bench {
            cfg,
            noise,
            benign,
            ordering_time,
        }
    })
}

fn of(results: &[StreamResult], method: Method) -> Vec<&StreamResult> {
    results.iter().filter(|r| r.method == method).collect()
}

fn mean_acc(results: &[StreamResult], method: Method) -> f64 {
    let accs: Vec<f64> = of(results, method)
        .iter()
        .map(|r| r.benign_accuracy)
        .collect();
    assert_eq!(accs.len(), SEEDS.len(), "{method}");
    mean_std(&accs).0
}

#[test]
fn criterion_01_autodiff_oracle() {
    let s = gradcheck_suite(100, 0, 1e-5).expect("gradcheck");
    let pass = s.max_rel_err < 1e-4 && s.elapsed < Duration::from_secs(30);
    verdict(
        1,
        pass,
        format!(
            "{} random networks, max rel err {:.3e} < 1e-4, {:.2}s < 30s",
            s.nets,
            s.max_rel_err,
            s.elapsed.as_secs_f64()
        ),
    );
}

fn random_grads(rng: &mut ChaCha8Rng) -> Grads {
    let mut g = Grads::new();
    for i in 0..rng.random_range(1..5) {
        let n = rng.random_range(1..20);
        let scale = 10f64.powi(rng.random_range(-6..4));
        let v = (0..n)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        g.insert(format!("p{i}"), Tensor::row(v).unwrap());
    }
    g
}

#[test]
fn criterion_02_epsilon_hat() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_norm: f64 = 0.0;
    for _ in 0..1000 {
        let g = random_grads(&mut rng);
        let rho = rng.random_range(0.001..2.0);
        let e = epsilon_hat(&g, rho, 0.0);
        worst_norm = worst_norm.max((e.global_norm() - rho).abs());
    }
    let zero = epsilon_hat(&random_grads(&mut rng).scale(0.0), 0.05, 1e-12);
    let zero_ok = zero.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0));

    let mut worst_delta: f64 = 0.0;
    for seed in 0..20 {
        let net = Network::init(NetworkSpec::mlp(6, 3), seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let batch = Tensor::new(
            vec![8, 6],
            (0..48).map(|_| r.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let cfg = EsmConfig {
            rho: 0.0,
            ..EsmConfig::default()
        };
        let mut a = net.clone();
        let mut b = net.clone();
        let (mut sa, mut sb) = (AdamState::new(), AdamState::new());
        for _ in 0..3 {
            esm_step(&mut a, &batch, &cfg, &mut sa).unwrap();
            em_step(&mut b, &batch, &cfg, &mut sb).unwrap();
        }
        for (name, p) in a.params().iter() {
            let q = b.params().get(name).unwrap();
            for (x, y) in p.value.data().iter().zip(q.data()) {
                worst_delta = worst_delta.max((x - y).abs());
            }
        }
    }
    let pass = worst_norm < 1e-9 && zero_ok && worst_delta < 1e-15;
    verdict(
        2,
        pass,
        format!(
            "max | ||eps|| - rho | = {worst_norm:.2e} < 1e-9; eps(0) = 0: {zero_ok}; rho=0 ESM vs EM max delta {worst_delta:.1e} < 1e-15"
        ),
    );
}

#[test]
fn criterion_03_hus_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (cap, classes) = (16, 5);
    let mut violations = Vec::new();
    let mut ops = 0;
    for (b, c0) in [0.0, 0.66, 0.99].into_iter().enumerate() {
        let mut bank =
            MemoryBank::new(cap, classes, EvictionPolicy::ClassBalanced, b as u64).unwrap();
        for _ in 0..10_000 / 3 + 1 {
            ops += 1;
            let label = rng.random_range(0..classes);
            let conf = if rng.random_bool(0.3) {
                c0
            } else {
                rng.random_range(0.0..1.0)
            };
            let before_max = bank.class_counts().iter().copied().max().unwrap_or(0);
            let prevalent = if bank.is_empty() {
                vec![]
            } else {
                bank.prevalent_classes().unwrap()
            };
            let was_full = bank.is_full();
            let before_len = bank.len();
            let out = bank.maybe_insert(Tensor::row(vec![conf]).unwrap(), label, conf, c0);
            if out.inserted() != (conf > c0) {
                violations.push(format!("gate: conf {conf} c0 {c0} -> {out:?}"));
            }
            if out == InsertOutcome::Rejected && bank.len() != before_len {
                violations.push("rejected insert changed the bank".into());
            }
            if bank.len() > cap {
                violations.push(format!("len {} > capacity", bank.len()));
            }
            if bank
                .items()
                .iter()
                .any(|it| it.confidence <= c0 || it.confidence.is_nan())
            {
                violations.push("item below the confidence floor".into());
            }
            if bank.recount() != bank.class_counts()
                || bank.class_counts().iter().sum::<usize>() != bank.len()
            {
                violations.push("histogram out of sync".into());
            }
            let after_max = bank.class_counts().iter().copied().max().unwrap_or(0);
            if was_full && out.inserted() && !prevalent.contains(&label) && after_max > before_max {
                violations.push(format!("max class count rose {before_max} -> {after_max}"));
            }
        }
    }
    verdict(
        3,
        violations.is_empty(),
        format!(
            "{ops} randomized inserts, C0 in {{0, 0.66, 0.99}}: {} invariant violations",
            violations.len()
        ),
    );
}

#[test]
fn criterion_04_ema_exactness() {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for m in [0.05, 0.2, 0.3, 1.0] {
        let mut net = Network::init(NetworkSpec::mlp(4, 3), 1).unwrap();
        for rs in net.running_mut() {
            rs.mean
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-3.0..3.0));
            rs.var
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(0.1..3.0));
        }
        let init: Vec<_> = net.running().to_vec();
        let target: Vec<BnBatchStats> = init
            .iter()
            .map(|rs| {
                let n = rs.mean.len();
                BnBatchStats {
                    mean: Tensor::new(
                        vec![1, n],
                        (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
                    )
                    .unwrap(),
                    var: Tensor::new(
                        vec![1, n],
                        (0..n).map(|_| rng.random_range(0.1..3.0)).collect(),
                    )
                    .unwrap(),
                }
            })
            .collect();
        for k in 1..=40 {
            net.ema_update(&target, m).unwrap();
            let decay = (1.0 - m).powi(k);
            for ((rs, r0), t) in net.running().iter().zip(&init).zip(&target) {
                for ((x, x0), mu) in rs.mean.data().iter().zip(r0.mean.data()).zip(t.mean.data()) {
                    worst = worst.max((x - (mu + decay * (x0 - mu))).abs());
                }
                for ((x, x0), mu) in rs.var.data().iter().zip(r0.var.data()).zip(t.var.data()) {
                    worst = worst.max((x - (mu + decay * (x0 - mu))).abs());
                }
            }
        }
    }
    verdict(
        4,
        worst < 1e-12,
        format!("k <= 40 updates, m in {{0.05, 0.2, 0.3, 1.0}}: max deviation from closed form {worst:.2e} < 1e-12"),
    );
}

#[test]
fn criterion_05_noise_ordering() {
    let b = bench();
    let (src, em, sotta) = (
        mean_acc(&b.noise, Method::Source),
        mean_acc(&b.noise, Method::EM),
        mean_acc(&b.noise, Method::SOTTA),
    );
    let pass =
        sotta >= src + 0.03 && sotta >= em + 0.05 && b.ordering_time < Duration::from_secs(120);
    verdict(
        5,
        pass,
        format!(
            "noise, 3 seeds: sotta {:.2}% vs source {:.2}% (need +3) and em {:.2}% (need +5); {:.1}s < 120s",
            100.0 * sotta,
            100.0 * src,
            100.0 * em,
            b.ordering_time.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_06_benign_parity() {
    let b = bench();
    let (em, sotta) = (
        mean_acc(&b.benign, Method::EM),
        mean_acc(&b.benign, Method::SOTTA),
    );
    verdict(
        6,
        sotta >= em - 0.02,
        format!(
            "benign, 3 seeds: sotta {:.2}% >= em {:.2}% - 2",
            100.0 * sotta,
            100.0 * em
        ),
    );
}

#[test]
fn criterion_07_noisy_gradient_norm() {
    let b = bench();
    let norm = |m: Method| {
        let v: Vec<f64> = of(&b.noise, m)
            .iter()
            .map(|r| r.mean_noisy_grad_norm.expect("diagnostics enabled"))
            .collect();
        mean_std(&v).0
    };
    let esm_off = Method::Adaptive(Flags {
        esm: false,
        ..Flags::ALL_ON
    });
    let (off, sotta, em) = (norm(esm_off), norm(Method::SOTTA), norm(Method::EM));
    verdict(
        7,
        sotta > off,
        format!(
            "noise, 3 seeds: mean noisy-window grad norm sotta {sotta:.5} > {esm_off} {off:.5} (em baseline {em:.5})"
        ),
    );
}

#[test]
fn criterion_08_filter_effectiveness() {
    let b = bench();
    assert_eq!(b.cfg.c0(), 0.99);
    let fr: Vec<f64> = of(&b.noise, Method::SOTTA)
        .iter()
        .map(|r| r.noisy_insertion_fraction())
        .collect();
    let mean = mean_std(&fr).0;
    verdict(
        8,
        mean < 0.05,
        format!(
            "noise, C0 = 0.99, 3 seeds: noisy share of memory insertions {:.2}% < 5%",
            100.0 * mean
        ),
    );
}

#[test]
fn criterion_09_ablation_structure() {
    let b = bench();
    let rows: Vec<CsvRow> = b
        .noise
        .iter()
        .filter(|r| r.method.flags().is_some())
        .map(|r| CsvRow::from_result(r, &b.cfg))
        .collect();
    let text = to_csv_string(&rows).unwrap();
    let lines: BTreeSet<&str> = text.lines().skip(1).collect();
    let labels: BTreeSet<String> = rows.iter().map(|r| r.method.clone()).collect();
    let mut trajectories_differ = true;
    for seed in SEEDS {
        let prints: BTreeSet<u64> = b
            .noise
            .iter()
            .filter(|r| r.seed == seed && r.method.flags().is_some())
            .map(|r| r.final_fingerprint)
            .collect();
        trajectories_differ &= prints.len() == 8;
    }
    let full = mean_acc(&b.noise, Method::SOTTA);
    let singles: Vec<(Method, f64)> = Flags::all()
        .into_iter()
        .filter(|f| f.count_on() == 1)
        .map(|f| (Method::Adaptive(f), mean_acc(&b.noise, Method::Adaptive(f))))
        .collect();
    let dominates = singles.iter().all(|&(_, a)| full >= a - 0.01);
    let pass = labels.len() == 8
        && lines.len() == rows.len()
        && rows.len() == 24
        && trajectories_differ
        && dominates;
    let singles_txt: Vec<String> = singles
        .iter()
        .map(|(m, a)| format!("{m} {:.2}%", 100.0 * a))
        .collect();
    verdict(
        9,
        pass,
        format!(
            "8 flag settings, {} distinct rows, distinct trajectories: {trajectories_differ}; sotta {:.2}% >= each of [{}] - 1",
            lines.len(),
            100.0 * full,
            singles_txt.join(", ")
        ),
    );
}

#[test]
fn criterion_10_determinism_across_threads() {
    let bin = env!("CARGO_BIN_EXE_sotta");
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("source.ckpt");
    let st = Command::new(bin)
        .args(["pretrain", "--out"])
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(
        st.status.success(),
        "{}",
        String::from_utf8_lossy(&st.stderr)
    );
    let mut csvs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("sweep_{threads}.csv"));
        let st = Command::new(bin)
            .env("SOTTA_THREADS", threads)
            .args([
                "sweep",
                "--scenarios",
                "noise,near",
                "--methods",
                "em,sotta",
                "--seeds",
                "0,1,2",
                "--ckpt",
            ])
            .arg(&ckpt)
            .arg("--out-csv")
            .arg(&out)
            .output()
            .unwrap();
        assert!(
            st.status.success(),
            "{}",
            String::from_utf8_lossy(&st.stderr)
        );
        csvs.push(std::fs::read(&out).unwrap());
    }
    let rows = csvs[0].iter().filter(|&&c| c == b'\n').count() - 1;
    verdict(
        10,
        csvs[0] == csvs[1] && rows == 12,
        format!(
            "sweep 2 scenarios x 2 methods x 3 seeds ({rows} rows): SOTTA_THREADS=1 and =4 byte-identical: {}",
            csvs[0] == csvs[1]
        ),
    );
}
