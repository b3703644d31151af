//! Closed-loop deployment and the two validation experiments.
//!
//! [`closed_loop`] is the single driver used by the teacher (dataset
//! generation) and by the student (rollouts). Round `t` (1-based) draws its
//! action uniform and reward noise from slot `t` of the stream, so two runs on
//! the same stream are coupled round by round.
//!
//! Policy indexing: a rollout of `T` rounds records `p_1, …, p_{T+1}`, where
//! `p_t` is computed from the first `t − 1` observations. Shock reports index
//! rows by the observation count `t = 1..T` and store
//! `Δ_t = ‖p̃_{t+1} − p_{t+1}‖₂`, so a shock at round `s` leaves every row
//! `t < s` exactly zero.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::bandit::{coupled_sample, draw_reward, sample_task, CrnStream, History, TaskVector};
use crate::error::{IcpoError, Result};
use crate::exec::Exec;
use crate::linalg;
use crate::lsa::{two_channel_logits, TwoChannelParams};
use crate::teacher::{mix_policy, teacher_logits, TeacherConfig, TeacherSettings};

/// One-shot reward perturbation seen only by the learner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shock {
    pub round: usize,
    pub delta: f64,
}

/// A closed-loop trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub task: TaskVector,
    /// What the learner observed (includes the shock, if any).
    pub history: History,
    /// Environment rewards before any shock.
    pub env_rewards: Vec<f64>,
    /// `s_1, …, s_{T+1}`.
    pub logits: Vec<DVector<f64>>,
    /// `p_1, …, p_{T+1}`.
    pub policies: Vec<DVector<f64>>,
}

impl Rollout {
    pub fn actions(&self) -> Vec<usize> {
        self.history.steps().iter().map(|s| s.action).collect()
    }
}

/// Runs `horizon` rounds, choosing logits with `logits_fn` on the observed history.
pub fn closed_loop<F>(
    cfg: &TeacherConfig,
    task: &TaskVector,
    horizon: usize,
    stream: &CrnStream,
    shock: Option<Shock>,
    logits_fn: F,
) -> Result<Rollout>
where
    F: Fn(&History) -> Result<DVector<f64>>,
{
    if horizon == 0 {
        return Err(IcpoError::InvalidConfig("horizon must be >= 1".into()));
    }
    if task.arms() != cfg.arms() {
        return Err(IcpoError::Dimension {
            expected: cfg.arms(),
            got: task.arms(),
        });
    }
    if let Some(s) = shock {
        if s.round == 0 || s.round > horizon {
            return Err(IcpoError::InvalidConfig(format!(
                "shock round {} outside 1..={horizon}",
                s.round
            )));
        }
        if !s.delta.is_finite() {
            return Err(IcpoError::InvalidConfig(
                "shock magnitude must be finite".into(),
            ));
        }
    }
    let mut history = History::new(cfg.arms());
    let mut env_rewards = Vec::with_capacity(horizon);
    let mut logits = Vec::with_capacity(horizon + 1);
    let mut policies = Vec::with_capacity(horizon + 1);
    for round in 1..=horizon {
        let s = logits_fn(&history)?;
        let p = mix_policy(&s, cfg.gamma())?.probs;
        let action = coupled_sample(p.as_slice(), stream.uniform(round))?;
        let reward = draw_reward(task, action, stream.noise(round), cfg.sigma_xi())?;
        let observed = match shock {
            Some(sh) if sh.round == round => reward + sh.delta,
            _ => reward,
        };
        history.push(action, observed)?;
        env_rewards.push(reward);
        logits.push(s);
        policies.push(p);
    }
    let s = logits_fn(&history)?;
    policies.push(mix_policy(&s, cfg.gamma())?.probs);
    logits.push(s);
    Ok(Rollout {
        task: task.clone(),
        history,
        env_rewards,
        logits,
        policies,
    })
}

/// Student rollout driven by the two-channel logits.
pub fn rollout(
    tc: &TwoChannelParams,
    task: &TaskVector,
    cfg: &TeacherConfig,
    horizon: usize,
    stream: &CrnStream,
    shock: Option<Shock>,
) -> Result<Rollout> {
    if tc.arms() != cfg.arms() {
        return Err(IcpoError::Dimension {
            expected: cfg.arms(),
            got: tc.arms(),
        });
    }
    closed_loop(cfg, task, horizon, stream, shock, |h| {
        two_channel_logits(h, tc)
    })
}

/// Teacher rollout under the same conventions as [`rollout`].
pub fn teacher_rollout(
    cfg: &TeacherConfig,
    task: &TaskVector,
    horizon: usize,
    stream: &CrnStream,
    shock: Option<Shock>,
) -> Result<Rollout> {
    closed_loop(cfg, task, horizon, stream, shock, |h| {
        teacher_logits(h, cfg)
    })
}

/// Per-round aggregate over test tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStat {
    pub round: usize,
    pub mean: f64,
    /// Population standard deviation over tasks.
    pub std: f64,
    pub bound: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn column_stats(per_task: &[Vec<f64>], rounds: usize) -> Vec<(f64, f64)> {
    (0..rounds)
        .map(|r| mean_std(&per_task.iter().map(|row| row[r]).collect::<Vec<_>>()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub teacher: TeacherSettings,
    pub test_tasks: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Rounds `1..=N`, gap `‖p̂_t − p^teacher_t‖₂`.
    pub rounds: Vec<RoundStat>,
}

impl MatchingReport {
    pub fn max_mean_gap(&self) -> f64 {
        self.rounds.iter().map(|r| r.mean).fold(0.0, f64::max)
    }
}

/// Runs the student closed loop on fresh tasks and, at every round, compares
/// its policy with the teacher's policy on the same realised history.
pub fn matching_experiment(
    cfg: &TeacherConfig,
    tc: &TwoChannelParams,
    test_tasks: usize,
    horizon: usize,
    seed: u64,
    exec: Exec,
) -> Result<MatchingReport> {
    if test_tasks == 0 {
        return Err(IcpoError::InvalidConfig(
            "need at least one test task".into(),
        ));
    }
    let gaps = exec.try_map(test_tasks, |i| -> Result<Vec<f64>> {
        let stream = CrnStream::new(seed, i as u64);
        let task = sample_task(&stream, cfg.arms(), cfg.tau_w())?;
        let run = rollout(tc, &task, cfg, horizon, &stream, None)?;
        (1..=horizon)
            .map(|t| {
                let teacher = mix_policy(
                    &teacher_logits(&run.history.prefix(t - 1), cfg)?,
                    cfg.gamma(),
                )?;
                Ok((&run.policies[t - 1] - teacher.probs).norm())
            })
            .collect()
    })?;
    let rounds = column_stats(&gaps, horizon)
        .into_iter()
        .enumerate()
        .map(|(i, (mean, std))| RoundStat {
            round: i + 1,
            mean,
            std,
            bound: None,
        })
        .collect();
    Ok(MatchingReport {
        teacher: cfg.settings(),
        test_tasks,
        horizon,
        seed,
        rounds,
    })
}

/// Sensitivity constants of the one-shot stability bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShockConstants {
    pub a: f64,
    pub b: f64,
}

/// `a = c(1−γ)/2 ‖U‖`, `b = c(1−γ)/2 √(K/2) (‖V + U Diag(w)‖ + √(2/π) σ_ξ ‖U‖)`.
pub fn shock_constants(cfg: &TeacherConfig, task: &TaskVector) -> Result<ShockConstants> {
    if task.arms() != cfg.arms() {
        return Err(IcpoError::Dimension {
            expected: cfg.arms(),
            got: task.arms(),
        });
    }
    shock_constants_raw(
        cfg.c(),
        cfg.gamma(),
        cfg.sigma_xi(),
        cfg.u(),
        cfg.v(),
        task.as_vector(),
    )
}

/// [`shock_constants`] on explicit operators; accepts `γ = 1`.
pub fn shock_constants_raw(
    c: f64,
    gamma: f64,
    sigma_xi: f64,
    u: &nalgebra::DMatrix<f64>,
    v: &nalgebra::DMatrix<f64>,
    w: &DVector<f64>,
) -> Result<ShockConstants> {
    if !(0.0..=1.0).contains(&gamma) || c < 0.0 || sigma_xi < 0.0 {
        return Err(IcpoError::Domain(
            "need c >= 0, sigma >= 0 and gamma in [0, 1]".into(),
        ));
    }
    let k = w.len();
    let scale = c * (1.0 - gamma) / 2.0;
    let u_norm = linalg::op_norm(u);
    let drift = linalg::op_norm(&(v + u * nalgebra::DMatrix::from_diagonal(w)));
    let a = scale * u_norm;
    let b = scale
        * (k as f64 / 2.0).sqrt()
        * (drift + (2.0 / std::f64::consts::PI).sqrt() * sigma_xi * u_norm);
    Ok(ShockConstants { a, b })
}

/// `a (1 + C_b)/s · (t/s)^{b−1} · |δ|` for `1 ≤ s ≤ t`.
pub fn shock_bound(a: f64, b: f64, c_b: f64, s: usize, t: usize, delta: f64) -> Result<f64> {
    if s == 0 || s > t {
        return Err(IcpoError::Domain(format!(
            "need 1 <= s <= t, got s={s}, t={t}"
        )));
    }
    let (s, t) = (s as f64, t as f64);
    Ok(a * (1.0 + c_b) / s * (t / s).powf(b - 1.0) * delta.abs())
}

/// How `C_b` is chosen for the analytical curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbChoice {
    /// `C_b = e^b` per task.
    ExpB,
    Fixed(f64),
}

impl CbChoice {
    pub fn value(self, b: f64) -> f64 {
        match self {
            CbChoice::ExpB => b.exp(),
            CbChoice::Fixed(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockReport {
    pub teacher: TeacherSettings,
    pub test_tasks: usize,
    pub horizon: usize,
    pub seed: u64,
    pub shock: Shock,
    pub c_b: CbChoice,
    pub constants: Vec<ShockConstants>,
    /// Rows `t = 1..=N`: mean `‖p̃_{t+1} − p_{t+1}‖₂` and the task-averaged bound for `t ≥ s`.
    pub rounds: Vec<RoundStat>,
}

impl ShockReport {
    pub fn b_range(&self) -> (f64, f64) {
        self.constants
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), k| {
                (lo.min(k.b), hi.max(k.b))
            })
    }
}

/// Baseline and shocked student rollouts on a shared stream per task.
pub fn shock_experiment(
    cfg: &TeacherConfig,
    tc: &TwoChannelParams,
    test_tasks: usize,
    horizon: usize,
    shock: Shock,
    c_b: CbChoice,
    seed: u64,
    exec: Exec,
) -> Result<ShockReport> {
    if test_tasks == 0 {
        return Err(IcpoError::InvalidConfig(
            "need at least one test task".into(),
        ));
    }
    if shock.round == 0 || shock.round > horizon {
        return Err(IcpoError::InvalidConfig(format!(
            "shock round {} outside 1..={horizon}",
            shock.round
        )));
    }
    let per_task = exec.try_map(test_tasks, |i| -> Result<(Vec<f64>, ShockConstants)> {
        let stream = CrnStream::new(seed, i as u64);
        let task = sample_task(&stream, cfg.arms(), cfg.tau_w())?;
        let base = rollout(tc, &task, cfg, horizon, &stream, None)?;
        let shocked = rollout(tc, &task, cfg, horizon, &stream, Some(shock))?;
        let drift = (1..=horizon)
            .map(|t| (&shocked.policies[t] - &base.policies[t]).norm())
            .collect();
        Ok((drift, shock_constants(cfg, &task)?))
    })?;
    let (drifts, constants): (Vec<_>, Vec<_>) = per_task.into_iter().unzip();
    let rounds = column_stats(&drifts, horizon)
        .into_iter()
        .enumerate()
        .map(|(i, (mean, std))| {
            let t = i + 1;
            let bound = if t >= shock.round {
                let total = constants
                    .iter()
                    .map(|k| shock_bound(k.a, k.b, c_b.value(k.b), shock.round, t, shock.delta))
                    .sum::<Result<f64>>()?;
                Some(total / constants.len() as f64)
            } else {
                None
            };
            Ok(RoundStat {
                round: t,
                mean,
                std,
                bound,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShockReport {
        teacher: cfg.settings(),
        test_tasks,
        horizon,
        seed,
        shock,
        c_b,
        constants,
        rounds,
    })
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV with columns `round,mean,std,bound` (bound empty where undefined),
/// floats printed with 17 significant digits.
pub fn rounds_csv(rounds: &[RoundStat]) -> String {
    let mut out = String::from("round,mean,std,bound\n");
    for r in rounds {
        let bound = r.bound.map(fmt17).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.round,
            fmt17(r.mean),
            fmt17(r.std),
            bound
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsa::TwoChannelParams;

    fn shock_cfg(lambda: f64) -> TeacherConfig {
        TeacherConfig::with_identity(5, 0.5, 0.8, lambda, 0.5, 0.1).unwrap()
    }

    #[test]
    fn null_shock_is_identity() {
        let cfg = shock_cfg(0.1);
        let tc = TwoChannelParams::teacher(&cfg);
        let stream = CrnStream::new(11, 3);
        let task = sample_task(&stream, 5, 0.5).unwrap();
        let a = rollout(&tc, &task, &cfg, 8, &stream, None).unwrap();
        let b = rollout(
            &tc,
            &task,
            &cfg,
            8,
            &stream,
            Some(Shock {
                round: 3,
                delta: 0.0,
            }),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_round_policy_is_uniform() {
        let cfg = shock_cfg(0.1);
        let tc = TwoChannelParams::from_projected(
            &nalgebra::DMatrix::identity(5, 5),
            &nalgebra::DMatrix::identity(5, 5),
        );
        let stream = CrnStream::new(1, 0);
        let task = sample_task(&stream, 5, 0.5).unwrap();
        let run = rollout(&tc, &task, &cfg, 1, &stream, None).unwrap();
        assert!(run.policies[0].iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert_eq!(run.policies.len(), 2);
    }

    #[test]
    fn shock_round_out_of_range() {
        let cfg = shock_cfg(0.1);
        let stream = CrnStream::new(1, 0);
        let task = sample_task(&stream, 5, 0.5).unwrap();
        let tc = TwoChannelParams::zeros(5);
        assert!(rollout(
            &tc,
            &task,
            &cfg,
            4,
            &stream,
            Some(Shock {
                round: 5,
                delta: 1.0
            })
        )
        .is_err());
        assert!(rollout(
            &tc,
            &task,
            &cfg,
            4,
            &stream,
            Some(Shock {
                round: 0,
                delta: 1.0
            })
        )
        .is_err());
    }

    #[test]
    fn shock_only_changes_observation() {
        let cfg = shock_cfg(0.1);
        let stream = CrnStream::new(5, 2);
        let task = sample_task(&stream, 5, 0.5).unwrap();
        let tc = TwoChannelParams::teacher(&cfg);
        let base = rollout(&tc, &task, &cfg, 6, &stream, None).unwrap();
        let hit = rollout(
            &tc,
            &task,
            &cfg,
            6,
            &stream,
            Some(Shock {
                round: 2,
                delta: 1.0,
            }),
        )
        .unwrap();
        assert_eq!(
            base.history.steps()[..2]
                .iter()
                .map(|s| s.action)
                .collect::<Vec<_>>(),
            hit.actions()[..2].to_vec()
        );
        assert_eq!(base.env_rewards[1], hit.env_rewards[1]);
        assert_eq!(hit.history.steps()[1].reward, hit.env_rewards[1] + 1.0);
        assert_eq!(base.policies[..2], hit.policies[..2]);
    }

    #[test]
    fn constants_examples() {
        let k = 3;
        let eye = nalgebra::DMatrix::identity(k, k);
        let zero = DVector::zeros(k);
        let full = shock_constants_raw(
            1.0,
            1.0,
            0.3,
            &eye,
            &(&eye * -0.1),
            &DVector::from_element(k, 1.0),
        )
        .unwrap();
        assert_eq!((full.a, full.b), (0.0, 0.0));
        let cfg = TeacherConfig::with_identity(k, 0.8, 0.0, 0.0, 1.0, 0.0).unwrap();
        let kk = shock_constants(&cfg, &TaskVector::new(zero).unwrap()).unwrap();
        assert_eq!(kk.b, 0.0);
        assert!((kk.a - 0.4).abs() < 1e-15);
    }

    #[test]
    fn bound_examples() {
        let at_s = shock_bound(0.3, 0.2, 0.2f64.exp(), 2, 2, -1.5).unwrap();
        assert!((at_s - 0.3 * (1.0 + 0.2f64.exp()) / 2.0 * 1.5).abs() < 1e-15);
        assert_eq!(shock_bound(0.3, 0.2, 1.0, 2, 9, 0.0).unwrap(), 0.0);
        assert!(shock_bound(0.3, 0.2, 1.0, 3, 2, 1.0).is_err());
        let curve: Vec<f64> = (2..40)
            .map(|t| shock_bound(0.3, 0.2, 1.0, 2, t, 1.0).unwrap())
            .collect();
        assert!(curve.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn csv_layout() {
        let rows = vec![
            RoundStat {
                round: 1,
                mean: 0.0,
                std: 0.0,
                bound: None,
            },
            RoundStat {
                round: 2,
                mean: 0.125,
                std: 0.5,
                bound: Some(1.0 / 3.0),
            },
        ];
        let csv = rounds_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "round,mean,std,bound");
        assert_eq!(lines[1], "1,0.0000000000000000e0,0.0000000000000000e0,");
        let third: f64 = lines[2].split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(third, 1.0 / 3.0);
    }
}
