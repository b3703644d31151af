//! K-armed linear bandit environment with common-random-number streams.
//!
//! Every random draw is addressed by `(seed, stream id, purpose, round)`. Two
//! trajectories built on the same [`CrnStream`] therefore share the sampling
//! uniform and the reward noise of every round by construction, whatever
//! actions they end up taking.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{IcpoError, Result};

/// Tolerance on `sum(p) = 1` accepted by [`coupled_sample`] and the Fisher helpers.
pub const SIMPLEX_TOL: f64 = 1e-12;

/// Per-arm mean reward vector `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector(DVector<f64>);

impl TaskVector {
    pub fn new(w: DVector<f64>) -> Result<Self> {
        if w.len() < 2 {
            return Err(IcpoError::InvalidConfig(format!(
                "task needs at least 2 arms, got {}",
                w.len()
            )));
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Err(IcpoError::Numeric("task vector".into()));
        }
        Ok(Self(w))
    }

    pub fn from_slice(w: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(w))
    }

    pub fn arms(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// One interaction: the arm played and the reward observed for it.
///
/// The one-hot vector `x = e_action` is derived on demand so the two can never disagree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryStep {
    pub action: usize,
    pub reward: f64,
}

impl HistoryStep {
    pub fn one_hot(&self, arms: usize) -> DVector<f64> {
        let mut x = DVector::zeros(arms);
        x[self.action] = 1.0;
        x
    }
}

/// Ordered in-context history with running count and reward-sum statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    arms: usize,
    steps: Vec<HistoryStep>,
    counts: DVector<f64>,
    reward_sums: DVector<f64>,
}

impl History {
    pub fn new(arms: usize) -> Self {
        Self {
            arms,
            steps: Vec::new(),
            counts: DVector::zeros(arms),
            reward_sums: DVector::zeros(arms),
        }
    }

    pub fn from_steps(arms: usize, steps: impl IntoIterator<Item = HistoryStep>) -> Result<Self> {
        let mut history = Self::new(arms);
        for step in steps {
            history.push(step.action, step.reward)?;
        }
        Ok(history)
    }

    pub fn push(&mut self, action: usize, reward: f64) -> Result<()> {
        if action >= self.arms {
            return Err(IcpoError::Index {
                index: action,
                arms: self.arms,
            });
        }
        if !reward.is_finite() {
            return Err(IcpoError::Numeric("reward".into()));
        }
        self.steps.push(HistoryStep { action, reward });
        self.counts[action] += 1.0;
        self.reward_sums[action] += reward;
        Ok(())
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[HistoryStep] {
        &self.steps
    }

    /// Count vector `n_t`.
    pub fn counts(&self) -> &DVector<f64> {
        &self.counts
    }

    /// Reward-weighted vector `g_t`.
    pub fn reward_sums(&self) -> &DVector<f64> {
        &self.reward_sums
    }

    /// History truncated to its first `len` steps.
    pub fn prefix(&self, len: usize) -> History {
        let mut out = History::new(self.arms);
        for step in &self.steps[..len.min(self.steps.len())] {
            out.counts[step.action] += 1.0;
            out.reward_sums[step.action] += step.reward;
            out.steps.push(*step);
        }
        out
    }
}

/// What a draw is used for; each purpose gets its own key so that, e.g., the
/// action uniforms are unaffected by how many noise draws were consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Purpose {
    Task,
    Action,
    Noise,
}

impl Purpose {
    fn salt(self) -> u64 {
        match self {
            Purpose::Task => 0x7a5c_0001_d1b5_4a32,
            Purpose::Action => 0x3c6e_f372_fe94_f82b,
            Purpose::Noise => 0xa54f_f53a_5f1d_36f1,
        }
    }
}

/// Counter-addressed random stream shared by coupled trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrnStream {
    seed: u64,
    stream: u64,
}

impl CrnStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    fn rng(&self, purpose: Purpose, round: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ purpose.salt());
        rng.set_stream(self.stream);
        // 2^20 words per round slot; a slot never uses more than a handful.
        rng.set_word_pos(u128::from(round) << 20);
        rng
    }

    /// Sampling uniform `u_t ∈ [0, 1)` for round `t`.
    pub fn uniform(&self, round: usize) -> f64 {
        self.rng(Purpose::Action, round as u64).random::<f64>()
    }

    /// Standard-normal reward noise `ε_t / σ_ξ` for round `t`.
    pub fn noise(&self, round: usize) -> f64 {
        self.rng(Purpose::Noise, round as u64)
            .sample(StandardNormal)
    }

    fn task_normals(&self, arms: usize) -> Vec<f64> {
        let mut rng = self.rng(Purpose::Task, 0);
        (0..arms).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// Draws `w ~ N(0, τ_w² I_K)` from the stream's task slot.
pub fn sample_task(stream: &CrnStream, arms: usize, tau_w: f64) -> Result<TaskVector> {
    if arms < 2 {
        return Err(IcpoError::InvalidConfig(format!(
            "need at least 2 arms, got {arms}"
        )));
    }
    if !(tau_w >= 0.0) || !tau_w.is_finite() {
        return Err(IcpoError::InvalidConfig(format!(
            "task prior std must be >= 0, got {tau_w}"
        )));
    }
    let w = stream
        .task_normals(arms)
        .into_iter()
        .map(|z| tau_w * z)
        .collect::<Vec<_>>();
    TaskVector::from_slice(&w)
}

/// Reward `w[action] + σ_ξ · noise`.
pub fn draw_reward(w: &TaskVector, action: usize, noise: f64, sigma_xi: f64) -> Result<f64> {
    if action >= w.arms() {
        return Err(IcpoError::Index {
            index: action,
            arms: w.arms(),
        });
    }
    Ok(w.as_slice()[action] + sigma_xi * noise)
}

pub(crate) fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(IcpoError::InvalidDistribution(
            "empty probability vector".into(),
        ));
    }
    if let Some(bad) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(IcpoError::InvalidDistribution(format!(
            "entry {bad} is negative or non-finite"
        )));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(IcpoError::InvalidDistribution(format!(
            "entries sum to {total:.17}"
        )));
    }
    Ok(())
}

/// Inverse-CDF sampling: the smallest index whose left-to-right cumulative sum exceeds `u`.
///
/// Fed the same `u`, two policies pick different arms exactly when `u` falls in
/// the part of `[0,1)` where their CDF partitions disagree.
pub fn coupled_sample(p: &[f64], u: f64) -> Result<usize> {
    check_simplex(p)?;
    if !(0.0..1.0).contains(&u) {
        return Err(IcpoError::Domain(format!("uniform {u} outside [0, 1)")));
    }
    let mut cumulative = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        cumulative += pi;
        if cumulative > u {
            return Ok(i);
        }
    }
    // Rounding left the total just below u: fall back to the last arm with mass.
    Ok(p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1))
}
