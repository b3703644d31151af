//! Subcommand implementations. Every artifact is written next to a JSON
//! sidecar holding the resolved config that produced it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use icpo_core::analysis::run_lemma_suite;
use icpo_core::icpo_loop::{
    matching_experiment, rounds_csv, shock_constants, shock_experiment, Shock,
};
use icpo_core::params_file::{read_params, write_params};
use icpo_core::pretrain::{
    empirical_stats, generate_dataset, gradient, load_dataset, loss_quadratic, save_dataset,
    sha256_hex, solve_ls, train_gd, GdOptions, Manifest,
};
use icpo_core::{sample_task, CrnStream, TeacherConfig, TwoChannelParams};
use icpo_meicpo::{
    compute_metrics, run_me_icpo, trace_records, Generator, HttpGenerator, MeIcpoRun, MockScript,
    QuestionOutcome, RunMetrics, ScriptedGenerator, TraceRecord,
};
use serde::{Deserialize, Serialize};

use crate::config::{
    ExperimentBlock, ExperimentConfig, GeneratorBlock, MeIcpoBlock, ShockBlock, Solver,
};
use crate::error::{io_err, CliError, Result};

pub const DATASET_DIR: &str = "dataset";
pub const PARAMS_FILE: &str = "params.bin";
pub const TRAINING_LOG: &str = "training_log.csv";
pub const TRAINING_JSON: &str = "training.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const LEMMA_CSV: &str = "lemma_suite.csv";
pub const LEMMA_JSON: &str = "lemma_suite.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const RUNS_JSON: &str = "runs.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let teacher = cfg.teacher_config()?;
    let ds = generate_dataset(
        &teacher,
        cfg.dataset.trajectories,
        cfg.dataset.horizon,
        cfg.dataset.seed,
        cfg.exec(),
    )?;
    Ok(save_dataset(&ds, &out.join(DATASET_DIR))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub config: ExperimentConfig,
    pub dataset_manifest_sha256: String,
    pub params_sha256: String,
    pub solver: Solver,
    pub step: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    /// Frobenius distance from the trained parameters to the teacher channel.
    pub teacher_distance: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig, dataset: &Path, out: &Path) -> Result<TrainingSummary> {
    let teacher = cfg.teacher_config()?;
    let manifest_path = dataset.join("manifest.json");
    if !manifest_path.is_file() {
        return Err(CliError::Usage(format!(
            "no dataset at {} (run `icpo generate` first)",
            dataset.display()
        )));
    }
    let ds = load_dataset(dataset)?;
    if ds.config.settings() != teacher.settings() {
        return Err(CliError::Usage(format!(
            "dataset at {} was generated with a different [teacher] block",
            dataset.display()
        )));
    }
    let fs_stats = empirical_stats(&ds, cfg.exec())?;
    let mut log = String::from("iteration,loss,grad_norm\n");
    let (params, step, iterations, converged) = match cfg.training.solver {
        Solver::Ls => {
            let params = solve_ls(&fs_stats)?;
            let g = gradient(&params, &fs_stats).norm();
            let _ = writeln!(
                log,
                "0,{},{}",
                fmt17(loss_quadratic(&params, &fs_stats)),
                fmt17(g)
            );
            (params, None, 0, true)
        }
        Solver::Gd => {
            let opts = GdOptions {
                step: cfg.training.step,
                max_iters: cfg.training.iters,
                tol: cfg.training.tol,
                init: None,
            };
            let outcome = train_gd(&fs_stats, &opts)?;
            for (i, (loss, g)) in outcome.losses.iter().zip(&outcome.grad_norms).enumerate() {
                let _ = writeln!(log, "{i},{},{}", fmt17(*loss), fmt17(*g));
            }
            (
                outcome.params,
                Some(outcome.step),
                outcome.iterations,
                outcome.converged,
            )
        }
    };
    let final_loss = loss_quadratic(&params, &fs_stats);
    let final_grad_norm = gradient(&params, &fs_stats).norm();
    let teacher_distance = (params.concat() - TwoChannelParams::teacher(&teacher).concat()).norm();

    let params_path = out.join(PARAMS_FILE);
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_params(&params_path, &params)?;
    write_file(&out.join(TRAINING_LOG), log)?;
    let summary = TrainingSummary {
        config: cfg.clone(),
        dataset_manifest_sha256: file_sha256(&manifest_path)?,
        params_sha256: file_sha256(&params_path)?,
        solver: cfg.training.solver,
        step,
        iterations,
        converged,
        final_loss,
        final_grad_norm,
        teacher_distance,
    };
    write_json(&out.join(TRAINING_JSON), &summary)?;
    Ok(summary)
}

/// Loads the given parameter file, or generates and trains into `out` first.
fn obtain_params(
    cfg: &ExperimentConfig,
    params: Option<&Path>,
    out: &Path,
) -> Result<(TwoChannelParams, PathBuf)> {
    let path = match params {
        Some(p) => p.to_path_buf(),
        None => {
            cmd_generate(cfg, out)?;
            cmd_train(cfg, &out.join(DATASET_DIR), out)?;
            out.join(PARAMS_FILE)
        }
    };
    let tc = read_params(&path)?;
    Ok((tc, path))
}

fn check_arms(teacher: &TeacherConfig, tc: &TwoChannelParams) -> Result<()> {
    if tc.arms() != teacher.arms() {
        return Err(CliError::Usage(format!(
            "parameter file has {} arms but [teacher] has {}",
            tc.arms(),
            teacher.arms()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRange {
    pub lambda: f64,
    pub b_min: f64,
    pub b_max: f64,
}

/// Per-task `b` range on the experiment's test tasks for each visit penalty.
pub fn lambda_ranges(cfg: &ExperimentConfig, block: &ShockBlock) -> Result<Vec<LambdaRange>> {
    let base = cfg
        .teacher
        .clone()
        .ok_or_else(|| CliError::Usage("config has no [teacher] block".into()))?;
    block
        .lambda_sweep
        .iter()
        .map(|&lambda| {
            let teacher = TeacherConfig::try_from(icpo_core::TeacherSettings {
                lambda,
                ..base.clone()
            })?;
            let mut range = LambdaRange {
                lambda,
                b_min: f64::INFINITY,
                b_max: f64::NEG_INFINITY,
            };
            for i in 0..block.test_tasks {
                let stream = CrnStream::new(block.seed, i as u64);
                let task = sample_task(&stream, teacher.arms(), teacher.tau_w())?;
                let b = shock_constants(&teacher, &task)?.b;
                range.b_min = range.b_min.min(b);
                range.b_max = range.b_max.max(b);
            }
            Ok(range)
        })
        .collect()
}

#[derive(Serialize)]
struct Sidecar<'a, R: Serialize> {
    config: &'a ExperimentConfig,
    params_sha256: Option<String>,
    report: &'a R,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_ranges: Option<Vec<LambdaRange>>,
}

/// Runs the configured experiment and returns the paths written.
pub fn cmd_experiment(
    cfg: &ExperimentConfig,
    params: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let block = cfg
        .experiment
        .as_ref()
        .ok_or_else(|| CliError::Usage("config has no [experiment] block".into()))?;
    let exec = cfg.exec();
    fs::create_dir_all(out).map_err(io_err(out))?;
    match block {
        ExperimentBlock::Matching(m) => {
            let teacher = cfg.teacher_config()?;
            let (tc, path) = obtain_params(cfg, params, out)?;
            check_arms(&teacher, &tc)?;
            let report = matching_experiment(&teacher, &tc, m.test_tasks, m.horizon, m.seed, exec)?;
            write_file(&out.join(REPORT_CSV), rounds_csv(&report.rounds))?;
            let sidecar = Sidecar {
                config: cfg,
                params_sha256: Some(file_sha256(&path)?),
                report: &report,
                lambda_ranges: None,
            };
            write_json(&out.join(REPORT_JSON), &sidecar)?;
            Ok(vec![out.join(REPORT_CSV), out.join(REPORT_JSON)])
        }
        ExperimentBlock::Shock(s) => {
            let teacher = cfg.teacher_config()?;
            let (tc, path) = obtain_params(cfg, params, out)?;
            check_arms(&teacher, &tc)?;
            let shock = Shock {
                round: s.shock_round,
                delta: s.shock_delta,
            };
            let report = shock_experiment(
                &teacher,
                &tc,
                s.test_tasks,
                s.horizon,
                shock,
                s.c_b,
                s.seed,
                exec,
            )?;
            write_file(&out.join(REPORT_CSV), rounds_csv(&report.rounds))?;
            let sidecar = Sidecar {
                config: cfg,
                params_sha256: Some(file_sha256(&path)?),
                report: &report,
                lambda_ranges: Some(lambda_ranges(cfg, s)?),
            };
            write_json(&out.join(REPORT_JSON), &sidecar)?;
            Ok(vec![out.join(REPORT_CSV), out.join(REPORT_JSON)])
        }
        ExperimentBlock::LemmaSuite(opts) => {
            let report = run_lemma_suite(opts, exec)?;
            let mut csv = String::from("id,samples,worst_slack,passed\n");
            for c in &report.checks {
                let _ = writeln!(
                    csv,
                    "{},{},{},{}",
                    c.id,
                    c.samples,
                    fmt17(c.worst_slack),
                    c.passed
                );
            }
            write_file(&out.join(LEMMA_CSV), csv)?;
            let sidecar = Sidecar {
                config: cfg,
                params_sha256: None,
                report: &report,
                lambda_ranges: None,
            };
            write_json(&out.join(LEMMA_JSON), &sidecar)?;
            Ok(vec![out.join(LEMMA_CSV), out.join(LEMMA_JSON)])
        }
        ExperimentBlock::MeIcpo(m) => {
            cmd_me_icpo_block(cfg, m, out)?;
            Ok(vec![
                out.join(METRICS_CSV),
                out.join(METRICS_JSON),
                out.join(TRACE_FILE),
                out.join(RUNS_JSON),
            ])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub question: String,
    pub gold: String,
}

pub fn load_questions(path: &Path) -> Result<Vec<QuestionRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Config {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct QuestionTrace<'a> {
    question: usize,
    #[serde(flatten)]
    record: &'a TraceRecord,
}

#[derive(Serialize)]
struct MetricsSidecar<'a> {
    config: &'a ExperimentConfig,
    metrics: &'a RunMetrics,
}

fn make_generator(block: &GeneratorBlock) -> Result<Box<dyn Fn() -> Box<dyn Generator>>> {
    match block {
        GeneratorBlock::Mock { script } => {
            let script = MockScript::load(script)?;
            Ok(Box::new(move || {
                Box::new(ScriptedGenerator::new(script.clone())) as Box<dyn Generator>
            }))
        }
        GeneratorBlock::Http(settings) => {
            let settings = settings.clone();
            Ok(Box::new(move || {
                Box::new(HttpGenerator::new(settings.clone())) as Box<dyn Generator>
            }))
        }
    }
}

fn cmd_me_icpo_block(
    cfg: &ExperimentConfig,
    block: &MeIcpoBlock,
    out: &Path,
) -> Result<RunMetrics> {
    let questions = load_questions(&block.questions)?;
    if questions.is_empty() {
        return Err(CliError::Usage(format!(
            "{} holds no questions",
            block.questions.display()
        )));
    }
    let generator = make_generator(&block.generator)?;
    let mut runs: Vec<MeIcpoRun> = Vec::with_capacity(questions.len());
    for q in &questions {
        let g = generator();
        runs.push(run_me_icpo(&q.question, &block.algorithm, g.as_ref())?);
    }

    let mut trace = String::new();
    for (i, run) in runs.iter().enumerate() {
        for record in trace_records(run) {
            trace.push_str(&serde_json::to_string(&QuestionTrace {
                question: i,
                record: &record,
            })?);
            trace.push('\n');
        }
    }
    write_file(&out.join(TRACE_FILE), trace)?;
    write_json(&out.join(RUNS_JSON), &runs)?;

    let outcomes: Vec<QuestionOutcome> = questions
        .iter()
        .zip(&runs)
        .map(|(q, r)| QuestionOutcome {
            gold: q.gold.clone(),
            samples: r.final_answers.clone(),
            final_answer: r.final_answer.clone(),
        })
        .collect();
    let mut metrics = compute_metrics(&outcomes, block.algorithm.mode, block.tie_seed)?;
    for r in &runs {
        metrics.accounting.merge(&r.accounting);
    }

    let mut csv = String::from(
        "question,gold,final_answer,final_correct,mean_correct,majority_answer,majority_correct\n",
    );
    for (i, (q, m)) in questions.iter().zip(&metrics.questions).enumerate() {
        let mean =
            m.sample_correct.iter().filter(|&&c| c).count() as f64 / m.sample_correct.len() as f64;
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{},{}",
            csv_field(&q.gold),
            csv_field(outcomes[i].final_answer.as_deref().unwrap_or("")),
            m.final_correct,
            fmt17(mean),
            csv_field(m.majority_answer.as_deref().unwrap_or("")),
            m.majority_correct
        );
    }
    write_file(&out.join(METRICS_CSV), csv)?;
    write_json(
        &out.join(METRICS_JSON),
        &MetricsSidecar {
            config: cfg,
            metrics: &metrics,
        },
    )?;
    Ok(metrics)
}

pub fn cmd_me_icpo(cfg: &ExperimentConfig, out: &Path) -> Result<RunMetrics> {
    match &cfg.experiment {
        Some(ExperimentBlock::MeIcpo(block)) => {
            fs::create_dir_all(out).map_err(io_err(out))?;
            cmd_me_icpo_block(cfg, block, out)
        }
        Some(other) => Err(CliError::Usage(format!(
            "me-icpo needs an experiment of kind \"me-icpo\", found \"{}\"",
            other.kind()
        ))),
        None => Err(CliError::Usage("config has no [experiment] block".into())),
    }
}
