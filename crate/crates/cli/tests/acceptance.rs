//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Tolerances and time limits are pinned below.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use icpo_core::analysis::pl_constant;
use icpo_core::icpo_loop::{rollout, teacher_rollout};
use icpo_core::lsa::{
    build_embedding, closed_form_logits, extract_two_channel, lsa_forward, project, query_logits,
    two_channel_logits, LsaParams,
};
use icpo_core::pretrain::{
    empirical_stats, generate_dataset, loss_quadratic, solve_ls, train_gd, GdOptions,
};
use icpo_core::{linalg, sample_task, CrnStream, Exec, History, TeacherConfig, TwoChannelParams};
use icpo_meicpo::{
    canonicalize, compute_metrics, majority_vote, run_me_icpo, AnswerMode, LookaheadRule,
    MeIcpoConfig, MockScript, Purpose, QuestionOutcome, RetryPolicy, ScriptedGenerator, Selection,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

const FORWARD_TOL: f64 = 1e-10;
const TWO_CHANNEL_TOL: f64 = 1e-10;
const POPULATION_TOL: f64 = 1e-10;
const RECOVERY_TOL: f64 = 1e-6;
const MATCHING_GAP_TOL: f64 = 1e-6;
const LS_GRAD_TOL: f64 = 1e-8;
const MATCHING_PAIRS: u64 = 2900;
const PAPER_B_RANGE: (f64, f64) = (0.1236, 0.2127);
const MIN_RANDOM_SAMPLES: u64 = 10_000;
const SANDWICH_DRAWS: u64 = 50;
const FD_REL_TOL: f64 = 1e-6;
const EXCESS_TARGET: f64 = 1e-8;
const MONOTONE_SLACK: f64 = 1e-15;
const FIT_FLOOR: f64 = 1e-12;
const RATE_FACTOR: f64 = 0.5;

const LIMIT_FORWARD: Duration = Duration::from_secs(10);
const LIMIT_POPULATION: Duration = Duration::from_secs(30);
const LIMIT_RECOVERY: Duration = Duration::from_secs(120);
const LIMIT_SHOCK: Duration = Duration::from_secs(120);
const LIMIT_LEMMA: Duration = Duration::from_secs(60);

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

fn random_history(rng: &mut ChaCha8Rng, k: usize, t: usize) -> History {
    let mut h = History::new(k);
    for _ in 0..t {
        let a = rng.random_range(0..k);
        h.push(a, rng.sample(StandardNormal)).unwrap();
    }
    h
}

fn random_config(rng: &mut ChaCha8Rng, k: usize, general_h: bool) -> TeacherConfig {
    let c = rng.random_range(0.1..2.0);
    let gamma = rng.random_range(0.05..0.9);
    let lambda = rng.random_range(0.0..1.0);
    let tau_w = rng.random_range(0.2..1.5);
    let sigma = rng.random_range(0.0..0.8);
    if general_h {
        let a = normal_matrix(rng, k, k);
        let h = &a * a.transpose() / k as f64 + DMatrix::identity(k, k) * 0.5;
        TeacherConfig::new(k, c, gamma, lambda, h, tau_w, sigma).unwrap()
    } else {
        TeacherConfig::with_identity(k, c, gamma, lambda, tau_w, sigma).unwrap()
    }
}

const ARMS: [usize; 3] = [2, 5, 10];

fn timed(limit: Duration, start: Instant) -> std::result::Result<Duration, String> {
    let elapsed = start.elapsed();
    if elapsed > limit {
        Err(format!("took {elapsed:.2?}, limit {limit:?}"))
    } else {
        Ok(elapsed)
    }
}

fn closed_form_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let k = ARMS[i % 3];
        let t = r.random_range(1..=50);
        let h = random_history(&mut r, k, t);
        let p = LsaParams::new(
            normal_matrix(&mut r, k + 1, k + 1),
            normal_matrix(&mut r, k + 1, k + 1),
        )
        .unwrap();
        let e = build_embedding(&h, &linalg::ones(k), 0.0).unwrap();
        let forward = query_logits(&lsa_forward(&e, &p, t as f64).unwrap());
        let closed = closed_form_logits(&h, &p).unwrap();
        worst = worst.max((forward - closed).amax());
    }
    let elapsed = timed(LIMIT_FORWARD, start)?;
    ensure!(
        worst <= FORWARD_TOL,
        "max difference {worst:e} > {FORWARD_TOL:e}"
    );
    Ok(format!(
        "1000 instances, max |forward - closed| = {worst:.2e}, {elapsed:.2?}"
    ))
}

/// Normal-form parameters whose query self-interaction vanishes.
fn normal_form_params(r: &mut ChaCha8Rng, k: usize) -> LsaParams {
    let mut p = LsaParams::new(
        normal_matrix(r, k + 1, k + 1),
        normal_matrix(r, k + 1, k + 1),
    )
    .unwrap();
    let alpha: f64 = r.random_range(-2.0..2.0);
    for i in 0..k {
        p.pv[(i, k)] = alpha;
    }
    if r.random_bool(0.5) {
        let target: f64 = r.random_range(-1.0..1.0);
        for i in 0..k {
            let row_sum: f64 = (0..k).map(|j| p.pv[(i, j)]).sum();
            for j in 0..k {
                p.pv[(i, j)] += (target - row_sum) / k as f64;
            }
        }
    } else {
        let (phi1, _) = p.transformed_query();
        let total = phi1.sum();
        for i in 0..k {
            p.kq[(i, 0)] -= total / k as f64;
        }
    }
    p
}

fn two_channel_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(202);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let k = ARMS[i % 3];
        let t = r.random_range(1..=50);
        let h = random_history(&mut r, k, t);
        let p = normal_form_params(&mut r, k);
        ensure!(p.is_normal_form(), "instance {i} is not in normal form");
        let tc = extract_two_channel(&p).unwrap();
        let closed = project(&closed_form_logits(&h, &p).unwrap());
        let two = two_channel_logits(&h, &tc).unwrap();
        worst = worst.max((closed - two).amax());
    }
    let elapsed = timed(LIMIT_FORWARD, start)?;
    ensure!(
        worst <= TWO_CHANNEL_TOL,
        "max difference {worst:e} > {TWO_CHANNEL_TOL:e}"
    );
    Ok(format!(
        "1000 normal-form instances, max |Proj closed - two-channel| = {worst:.2e}, {elapsed:.2?}"
    ))
}

fn population_equivalence() -> Outcome {
    let start = Instant::now();
    let mut r = rng(303);
    let mut worst = 0.0f64;
    let horizon = 30;
    for i in 0..100u64 {
        let k = ARMS[i as usize % 3];
        let cfg = random_config(&mut r, k, i % 2 == 0);
        let stream = CrnStream::new(404, i);
        let task = sample_task(&stream, k, cfg.tau_w()).unwrap();
        let tc = TwoChannelParams::teacher(&cfg);
        let student = rollout(&tc, &task, &cfg, horizon, &stream, None).unwrap();
        let teacher = teacher_rollout(&cfg, &task, horizon, &stream, None).unwrap();
        ensure!(
            student.actions() == teacher.actions(),
            "task {i}: action sequences differ"
        );
        for (a, b) in student.policies.iter().zip(&teacher.policies) {
            worst = worst.max((a - b).amax());
        }
    }
    let elapsed = timed(LIMIT_POPULATION, start)?;
    ensure!(
        worst <= POPULATION_TOL,
        "max policy difference {worst:e} > {POPULATION_TOL:e}"
    );
    Ok(format!(
        "100 tasks and configs, sup-norm policy gap {worst:.2e}, {elapsed:.2?}"
    ))
}

fn presets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("presets")
}

fn icpo(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_icpo"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "icpo {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(())
}

fn run_preset(preset: &str, out: &Path) -> std::result::Result<(), String> {
    let config = presets().join(preset);
    let sub = if preset.starts_with("me_icpo") {
        "me-icpo"
    } else {
        "experiment"
    };
    icpo(&[
        sub,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn finite_sample_recovery(root: &Path) -> Outcome {
    let start = Instant::now();
    let out = root.join("recovery");
    run_preset("matching.toml", &out)?;
    let elapsed = timed(LIMIT_RECOVERY, start)?;
    let manifest = read_json(&out.join("dataset/manifest.json"));
    ensure!(
        manifest["pairs"] == MATCHING_PAIRS,
        "dataset has {} pairs, expected {MATCHING_PAIRS}",
        manifest["pairs"]
    );
    let training = read_json(&out.join("training.json"));
    let distance = training["teacher_distance"].as_f64().unwrap();
    let grad = training["final_grad_norm"].as_f64().unwrap();
    ensure!(
        distance <= RECOVERY_TOL,
        "Frobenius distance to teacher channel {distance:e} > {RECOVERY_TOL:e}"
    );
    ensure!(
        grad <= LS_GRAD_TOL,
        "gradient norm {grad:e} > {LS_GRAD_TOL:e}"
    );
    let rows = csv_rows(&out.join("report.csv"));
    ensure!(
        rows.len() == 30,
        "report has {} rows, expected 30",
        rows.len()
    );
    let report = read_json(&out.join("report.json"));
    ensure!(
        report["report"]["test_tasks"] == 64,
        "expected 64 test tasks"
    );
    let worst = rows
        .iter()
        .map(|r| r[1].parse::<f64>().unwrap())
        .fold(0.0, f64::max);
    ensure!(
        worst <= MATCHING_GAP_TOL,
        "mean gap {worst:e} > {MATCHING_GAP_TOL:e}"
    );
    Ok(format!("recovery error {distance:.2e}, gradient {grad:.2e}, max mean gap {worst:.2e}, {elapsed:.2?}"))
}

fn check_shock_report(out: &Path) -> std::result::Result<String, String> {
    let rows = csv_rows(&out.join("report.csv"));
    ensure!(
        rows.len() == 10,
        "report has {} rows, expected 10",
        rows.len()
    );
    let mean: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    let std: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    ensure!(
        mean[0] == 0.0 && std[0] == 0.0,
        "pre-shock drift is not exactly zero: {} ± {}",
        mean[0],
        std[0]
    );
    ensure!(rows[0][3].is_empty(), "bound reported before the shock");
    let peak = mean[1..].iter().copied().fold(0.0, f64::max);
    ensure!(
        mean[9] < peak,
        "drift at t=10 ({:e}) is not below the post-shock maximum ({peak:e})",
        mean[9]
    );
    for (t, row) in rows.iter().enumerate().skip(1) {
        let bound: f64 = row[3]
            .parse()
            .map_err(|_| format!("missing bound at t={}", t + 1))?;
        ensure!(
            mean[t] < bound,
            "t={}: mean {:e} exceeds bound {bound:e}",
            t + 1,
            mean[t]
        );
    }
    let report = read_json(&out.join("report.json"));
    let ranges = report["lambda_ranges"]
        .as_array()
        .ok_or("no lambda sweep in the report")?;
    let overlapping: Vec<f64> = ranges
        .iter()
        .filter(|r| {
            r["b_min"].as_f64().unwrap() <= PAPER_B_RANGE.1
                && r["b_max"].as_f64().unwrap() >= PAPER_B_RANGE.0
        })
        .map(|r| r["lambda"].as_f64().unwrap())
        .collect();
    ensure!(
        !overlapping.is_empty(),
        "no swept lambda gives b overlapping {PAPER_B_RANGE:?}"
    );
    Ok(format!(
        "peak {peak:.3e}, t=10 {:.3e}, lambdas overlapping b-range {overlapping:?}",
        mean[9]
    ))
}

fn shock_stability(root: &Path) -> Outcome {
    let start = Instant::now();
    let ls = root.join("shock_ls");
    let gd = root.join("shock_gd");
    run_preset("shock.toml", &ls)?;
    run_preset("shock_gd.toml", &gd)?;
    let elapsed = timed(LIMIT_SHOCK, start)?;
    let a = check_shock_report(&ls).map_err(|e| format!("ls student: {e}"))?;
    check_shock_report(&gd).map_err(|e| format!("gd student: {e}"))?;
    Ok(format!("ls and gd students; {a}; {elapsed:.2?}"))
}

fn lemma_suite(root: &Path) -> Outcome {
    let start = Instant::now();
    let out = root.join("lemma");
    run_preset("lemma_suite.toml", &out)?;
    let elapsed = timed(LIMIT_LEMMA, start)?;
    let report = read_json(&out.join("lemma_suite.json"));
    let checks = report["report"]["checks"].as_array().unwrap();
    let find = |id: &str| {
        checks
            .iter()
            .find(|c| c["id"] == id)
            .cloned()
            .ok_or(format!("missing check {id}"))
    };
    for c in checks {
        ensure!(
            c["passed"] == true,
            "check {} failed with slack {}",
            c["id"],
            c["worst_slack"]
        );
    }
    for id in ["fisher_spectrum", "softmax_lipschitz"] {
        let n = find(id)?["samples"].as_u64().unwrap();
        ensure!(n >= MIN_RANDOM_SAMPLES, "{id} used {n} samples");
    }
    let draws = find("kl_sandwich")?["samples"].as_u64().unwrap();
    ensure!(draws >= SANDWICH_DRAWS, "kl_sandwich used {draws} draws");
    let pd = find("restricted_moment_pd")?["worst_slack"]
        .as_f64()
        .unwrap();
    ensure!(
        pd > 0.0,
        "restricted moment eigenvalue {pd:e} is not positive"
    );
    let fd = find("gradient_fd")?["worst_slack"].as_f64().unwrap();
    ensure!(
        (0.0..=FD_REL_TOL).contains(&fd),
        "finite-difference slack {fd:e} outside [0, {FD_REL_TOL:e}]"
    );
    Ok(format!(
        "{} checks passed, restricted eigenvalue {pd:.3e}, {elapsed:.2?}",
        checks.len()
    ))
}

fn convergence() -> Outcome {
    let cfg = TeacherConfig::with_identity(5, 0.5, 0.5, 0.1, 1.0, 0.1).unwrap();
    let ds = generate_dataset(&cfg, 200, 20, 77, Exec::Parallel).unwrap();
    let fs = empirical_stats(&ds, Exec::Parallel).unwrap();
    let best = loss_quadratic(&solve_ls(&fs).unwrap(), &fs);
    let gd = train_gd(
        &fs,
        &GdOptions {
            tol: 1e-12,
            ..GdOptions::default()
        },
    )
    .unwrap();
    let excess: Vec<f64> = gd.losses.iter().map(|l| l - best).collect();
    for (i, w) in excess.windows(2).enumerate() {
        ensure!(
            w[1] <= w[0] + MONOTONE_SLACK,
            "excess loss rises at iteration {}: {:e} -> {:e}",
            i + 1,
            w[0],
            w[1]
        );
    }
    let last = *excess.last().unwrap();
    ensure!(
        last <= EXCESS_TARGET,
        "final excess loss {last:e} > {EXCESS_TARGET:e}"
    );
    let pts: Vec<(f64, f64)> = excess
        .iter()
        .enumerate()
        .filter(|(_, &e)| e > FIT_FLOOR)
        .map(|(i, &e)| (i as f64, e.ln()))
        .collect();
    ensure!(pts.len() >= 3, "too few points above the fit floor");
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let rate = -slope;
    let mu = pl_constant(&fs.gamma, &fs.sigma);
    let predicted = 2.0 * mu * gd.step;
    ensure!(
        rate >= RATE_FACTOR * predicted,
        "fitted rate {rate:.4} < {RATE_FACTOR} x predicted {predicted:.4}"
    );
    Ok(format!(
        "{} iterations, final excess {last:.2e}, fitted rate {rate:.4} vs predicted 2*mu*step {predicted:.4}",
        gd.iterations
    ))
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn quick(rounds: usize, candidates: usize, m: usize) -> MeIcpoConfig {
    MeIcpoConfig {
        rounds,
        candidates,
        lookahead_samples: m,
        retry: RetryPolicy::none(),
        ..MeIcpoConfig::default()
    }
}

fn vote_oracle(answers: &[Option<String>]) -> Option<(String, usize)> {
    let canon: Vec<Option<String>> = answers
        .iter()
        .map(|a| {
            a.as_deref()
                .and_then(|a| canonicalize(a, AnswerMode::Numeric))
        })
        .collect();
    let mut best: Option<(String, usize)> = None;
    for c in canon.iter().flatten() {
        let n = canon
            .iter()
            .filter(|d| d.as_deref() == Some(c.as_str()))
            .count();
        best = match best {
            Some((b, m)) if m > n || (m == n && b <= *c) => Some((b, m)),
            _ => Some((c.clone(), n)),
        };
    }
    best
}

fn me_icpo_loop() -> Outcome {
    // (a) rewards against a brute-force mode.
    let pool = [
        None,
        Some("1"),
        Some("1.0"),
        Some("2"),
        Some("3"),
        Some("03"),
        Some("x"),
    ];
    let mut r = rng(808);
    for case in 0..2000 {
        let len = r.random_range(1..10);
        let answers: Vec<Option<String>> = (0..len)
            .map(|_| pool[r.random_range(0..pool.len())].map(str::to_string))
            .collect();
        match (
            majority_vote(&answers, AnswerMode::Numeric),
            vote_oracle(&answers),
        ) {
            (Ok(v), Some((mode, mult))) => {
                ensure!(
                    v.canonical == mode,
                    "case {case}: mode {} vs oracle {mode}",
                    v.canonical
                );
                let total: usize = v.rewards.iter().map(|&x| x as usize).sum();
                ensure!(
                    total == mult,
                    "case {case}: reward sum {total} vs multiplicity {mult}"
                );
            }
            (Err(_), None) => {}
            (v, o) => return Err(format!("case {case}: vote {v:?} vs oracle {o:?}")),
        }
    }

    // (b) committed candidate is the measured-entropy argmin, ties to the lowest index.
    let script = MockScript {
        candidates: vec![strings(&[
            "Idea alpha. boxed{1}",
            "Idea beta. boxed{1}",
            "Idea gamma. boxed{2}",
        ])],
        lookahead: vec![
            LookaheadRule {
                contains: "beta".into(),
                texts: strings(&["boxed{1}"]),
            },
            LookaheadRule {
                contains: "alpha".into(),
                texts: strings(&["boxed{1}", "boxed{2}"]),
            },
            LookaheadRule {
                contains: "gamma".into(),
                texts: strings(&["boxed{2}", "boxed{3}"]),
            },
        ],
        final_texts: strings(&["boxed{1}"]),
        ..MockScript::default()
    };
    let run = run_me_icpo(
        "Q",
        &quick(2, 3, 4),
        &ScriptedGenerator::new(script.clone()),
    )
    .map_err(|e| e.to_string())?;
    for round in &run.rounds {
        let h: Vec<f64> = round
            .candidates
            .iter()
            .map(|c| c.entropy.unwrap())
            .collect();
        let chosen = round.selected.unwrap();
        ensure!(
            chosen == 1 && h[1] == 0.0,
            "round {}: selected {chosen} with entropies {h:?}",
            round.round
        );
        ensure!(
            h.iter().all(|&x| h[chosen] <= x),
            "selected entropy is not minimal"
        );
    }
    let mut tied = script.clone();
    tied.lookahead.clear();
    tied.default_lookahead = strings(&["boxed{1}", "boxed{2}"]);
    let run = run_me_icpo("Q", &quick(1, 3, 4), &ScriptedGenerator::new(tied))
        .map_err(|e| e.to_string())?;
    ensure!(
        run.rounds[0].selected == Some(0),
        "tie not broken to the lowest index"
    );

    // (c) one idea per non-skipped round.
    let skipping = MockScript {
        candidates: vec![
            strings(&["nothing", "nothing"]),
            strings(&["A. boxed{4}", "B. boxed{5}"]),
            strings(&["still nothing", "boxed{"]),
            strings(&["C. boxed{4}", "D. boxed{4}"]),
            strings(&["E. boxed{6}", "F. boxed{4}"]),
        ],
        default_lookahead: strings(&["boxed{4}"]),
        ..MockScript::default()
    };
    let g = ScriptedGenerator::new(skipping);
    let run = run_me_icpo("Q", &quick(5, 2, 2), &g).map_err(|e| e.to_string())?;
    ensure!(
        run.skipped_rounds() == 2,
        "expected 2 skipped rounds, got {}",
        run.skipped_rounds()
    );
    ensure!(
        run.history.len() == 3,
        "history has {} ideas after 3 scored rounds",
        run.history.len()
    );
    let prompts: Vec<_> = g
        .calls()
        .into_iter()
        .filter(|c| c.purpose == Purpose::Candidate)
        .collect();
    let sizes: Vec<usize> = prompts
        .iter()
        .map(|c| c.messages[1].content.matches("]- ").count())
        .collect();
    ensure!(
        sizes == vec![0, 0, 1, 1, 2],
        "history sizes seen by the generator: {sizes:?}"
    );

    // (d) metrics against an exhaustive tie-break enumeration.
    let sets: Vec<Vec<QuestionOutcome>> = vec![
        vec![
            outcome("1", &["1", "1", "2", "2"], Some("1")),
            outcome("3", &["3", "4", "4", "5"], Some("3")),
        ],
        vec![
            outcome("1", &["1", "2", "3", "4"], Some("2")),
            outcome("5", &["5.0", "5", "6", "6"], None),
        ],
        vec![
            outcome("7", &["7", "7", "7", "7"], Some("7")),
            outcome("8", &["9", "9", "0", "8"], Some("9")),
        ],
    ];
    for (s, set) in sets.iter().enumerate() {
        let (mean, acc, maj_values) = enumerate_metrics(set);
        let m = compute_metrics(set, AnswerMode::Numeric, 5).map_err(|e| e.to_string())?;
        ensure!(
            (m.mean_at_k - mean).abs() < 1e-15,
            "set {s}: Mean@k {} vs {mean}",
            m.mean_at_k
        );
        ensure!(
            m.accuracy == acc,
            "set {s}: Accuracy {} vs {acc}",
            m.accuracy
        );
        let expected = maj_values.iter().sum::<f64>() / maj_values.len() as f64;
        ensure!(
            (m.maj_at_k_expected - expected).abs() < 1e-15,
            "set {s}: expected Maj@k {} vs {expected}",
            m.maj_at_k_expected
        );
        ensure!(
            maj_values.contains(&m.maj_at_k),
            "set {s}: Maj@k {} not reachable",
            m.maj_at_k
        );
    }

    // (e) ablations.
    let mut no_tags = quick(2, 3, 4);
    no_tags.reward_tags = false;
    let g = ScriptedGenerator::new(script.clone());
    run_me_icpo("Q", &no_tags, &g).map_err(|e| e.to_string())?;
    let second = g
        .calls()
        .into_iter()
        .filter(|c| c.purpose == Purpose::Candidate)
        .nth(1)
        .unwrap();
    ensure!(
        !second.messages[1].content.contains("reward"),
        "reward tags leaked into the untagged history"
    );
    ensure!(
        second.messages[1].content.contains("[0]- Idea beta."),
        "untagged history lost the idea"
    );
    let mut greedy = quick(1, 3, 4);
    greedy.selection = Selection::RewardGreedy;
    let mut reordered = script;
    reordered.candidates = vec![strings(&[
        "Idea gamma. boxed{2}",
        "Idea alpha. boxed{1}",
        "Idea beta. boxed{1}",
    ])];
    let g = ScriptedGenerator::new(reordered);
    let run = run_me_icpo("Q", &greedy, &g).map_err(|e| e.to_string())?;
    ensure!(
        g.call_count(Purpose::Lookahead) == 0,
        "reward-greedy selection issued lookahead calls"
    );
    ensure!(
        run.rounds[0].selected == Some(1),
        "reward-greedy picked {:?}",
        run.rounds[0].selected
    );
    Ok(
        "vote oracle, entropy argmin, history growth, metric enumeration and ablations agree"
            .into(),
    )
}

fn outcome(gold: &str, samples: &[&str], fin: Option<&str>) -> QuestionOutcome {
    QuestionOutcome {
        gold: gold.into(),
        samples: samples.iter().map(|s| Some(s.to_string())).collect(),
        final_answer: fin.map(str::to_string),
    }
}

/// Mean@k, Accuracy and every equally likely Maj@k value over all tie-breaks.
fn enumerate_metrics(set: &[QuestionOutcome]) -> (f64, f64, Vec<f64>) {
    let canon = |a: &str| canonicalize(a, AnswerMode::Numeric).unwrap_or_else(|| a.to_string());
    let n = set.len() as f64;
    let mut mean = 0.0;
    let mut acc = 0.0;
    let mut choices: Vec<Vec<bool>> = Vec::new();
    for q in set {
        let gold = canon(&q.gold);
        let answers: Vec<String> = q.samples.iter().flatten().map(|a| canon(a)).collect();
        mean += answers.iter().filter(|a| **a == gold).count() as f64 / q.samples.len() as f64 / n;
        acc += f64::from(u8::from(
            q.final_answer.as_deref().map(canon) == Some(gold.clone()),
        )) / n;
        let count = |a: &String| answers.iter().filter(|b| *b == a).count();
        let best = answers.iter().map(count).max().unwrap_or(0);
        let mut winners: Vec<&String> = answers.iter().filter(|a| count(a) == best).collect();
        winners.sort();
        winners.dedup();
        choices.push(winners.iter().map(|w| **w == gold).collect());
    }
    let mut values = vec![0.0];
    for c in &choices {
        values = values
            .iter()
            .flat_map(|v| c.iter().map(move |&hit| v + f64::from(u8::from(hit)) / n))
            .collect();
    }
    (mean, acc, values)
}

fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

fn reproducibility(root: &Path) -> Outcome {
    let presets = [
        "matching.toml",
        "shock.toml",
        "shock_gd.toml",
        "lemma_suite.toml",
        "me_icpo_mock.toml",
    ];
    let mut csvs = 0;
    for preset in presets {
        let a = root.join("repro_a").join(preset);
        let b = root.join("repro_b").join(preset);
        run_preset(preset, &a)?;
        run_preset(preset, &b)?;
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        ensure!(sa.len() == sb.len(), "{preset}: different file sets");
        for ((pa, da), (pb, db)) in sa.iter().zip(&sb) {
            ensure!(
                pa == pb,
                "{preset}: file {} vs {}",
                pa.display(),
                pb.display()
            );
            ensure!(
                da == db,
                "{preset}: {} differs between reruns",
                pa.display()
            );
            if pa.extension().is_some_and(|e| e == "csv") {
                csvs += 1;
            }
        }
    }
    let config = presets_path("matching.toml");
    let seq = root.join("repro_seq");
    let cfg_text = fs::read_to_string(&config)
        .unwrap()
        .replace("output_dir", "execution = \"sequential\"\noutput_dir");
    let seq_cfg = root.join("matching_sequential.toml");
    fs::write(&seq_cfg, cfg_text).unwrap();
    icpo(&[
        "experiment",
        "--config",
        seq_cfg.to_str().unwrap(),
        "--out",
        seq.to_str().unwrap(),
    ])?;
    let par = fs::read(root.join("repro_a/matching.toml/report.csv")).unwrap();
    ensure!(
        fs::read(seq.join("report.csv")).unwrap() == par,
        "sequential and parallel reports differ"
    );
    Ok(format!(
        "{} presets rerun, {csvs} CSV files byte-identical, sequential == parallel",
        presets.len()
    ))
}

fn presets_path(name: &str) -> PathBuf {
    presets().join(name)
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let criteria: Vec<Criterion> = vec![
        ("closed-form equivalence", Box::new(closed_form_equivalence)),
        ("two-channel equivalence", Box::new(two_channel_equivalence)),
        ("population equivalence", Box::new(population_equivalence)),
        (
            "finite-sample recovery",
            Box::new(|| finite_sample_recovery(root)),
        ),
        ("shock stability", Box::new(|| shock_stability(root))),
        ("lemma suite", Box::new(|| lemma_suite(root))),
        ("gradient descent convergence", Box::new(convergence)),
        (
            "ME-ICPO loop under the scripted generator",
            Box::new(me_icpo_loop),
        ),
        ("reproducibility", Box::new(|| reproducibility(root))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => println!("PASS {}: {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}: {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
