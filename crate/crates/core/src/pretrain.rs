//! Supervised pretraining on teacher rollouts.
//!
//! Each trajectory of `N` rounds contributes the `N − 1` pairs `t = 1..N−1`:
//! features `z̄_t = (n_t/t, g_t/t)`, label `y_{t+1} = Proj(s_{t+1})`, and
//! Fisher weight taken at the round-`t` teacher policy `p_t`.
//!
//! The student is the effective pair `W̄ = [W_n W_g]` restricted to
//! `W̄ = Proj W̄ P_S` with `S = 1⊥ ⊕ 1⊥`. Both solvers work in that subspace.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bandit::{check_simplex, sample_task, CrnStream, History, HistoryStep, TaskVector};
use crate::error::{IcpoError, Result};
use crate::exec::Exec;
use crate::icpo_loop::teacher_rollout;
use crate::linalg;
use crate::lsa::{two_channel_logits, TwoChannelParams};
use crate::teacher::{TeacherConfig, TeacherSettings};

/// Minimum restricted eigenvalue accepted by [`solve_ls`].
pub const RANK_TOL: f64 = 1e-10;

/// One teacher rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task: TaskVector,
    pub history: History,
    /// Teacher logits `s_1, …, s_{N+1}`.
    pub logits: Vec<DVector<f64>>,
    /// Projected logits `Proj(s_1), …, Proj(s_{N+1})`.
    pub labels: Vec<DVector<f64>>,
    /// Teacher mixed policies `p_1, …, p_{N+1}`.
    pub policies: Vec<DVector<f64>>,
}

/// View of one training pair `t ∈ 1..N−1`.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a> {
    pub t: usize,
    pub prefix: &'a History,
    /// `y_{t+1}`.
    pub label: &'a DVector<f64>,
    /// `p_t`, used for the Fisher weight.
    pub fisher_policy: &'a DVector<f64>,
    /// `p_{t+1}`, the teacher's next policy.
    pub next_policy: &'a DVector<f64>,
}

impl Pair<'_> {
    /// `z̄_t = (n_t/t; g_t/t)`.
    pub fn features(&self) -> DVector<f64> {
        let k = self.prefix.arms();
        let t = self.t as f64;
        let mut z = DVector::zeros(2 * k);
        z.rows_mut(0, k).copy_from(&(self.prefix.counts() / t));
        z.rows_mut(k, k).copy_from(&(self.prefix.reward_sums() / t));
        z
    }
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.history.len()
    }

    /// Calls `f` on each training pair in round order.
    pub fn for_each_pair<F: FnMut(Pair<'_>)>(&self, mut f: F) {
        let mut prefix = History::new(self.history.arms());
        for (idx, step) in self
            .history
            .steps()
            .iter()
            .enumerate()
            .take(self.horizon().saturating_sub(1))
        {
            prefix
                .push(step.action, step.reward)
                .expect("steps were validated on construction");
            let t = idx + 1;
            f(Pair {
                t,
                prefix: &prefix,
                label: &self.labels[t],
                fisher_policy: &self.policies[t - 1],
                next_policy: &self.policies[t],
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainDataset {
    pub config: TeacherConfig,
    pub horizon: usize,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl PretrainDataset {
    pub fn arms(&self) -> usize {
        self.config.arms()
    }

    /// `M = B (N − 1)`.
    pub fn pair_count(&self) -> usize {
        self.trajectories.len() * (self.horizon - 1)
    }
}

/// `B` teacher rollouts of `N` rounds; trajectory `τ` uses stream `(seed, τ)`.
pub fn generate_dataset(
    cfg: &TeacherConfig,
    trajectories: usize,
    horizon: usize,
    seed: u64,
    exec: Exec,
) -> Result<PretrainDataset> {
    if trajectories == 0 {
        return Err(IcpoError::InvalidConfig(
            "need at least one trajectory".into(),
        ));
    }
    if horizon < 2 {
        return Err(IcpoError::InvalidConfig(format!(
            "horizon must be >= 2, got {horizon}"
        )));
    }
    let trajectories = exec.try_map(trajectories, |tau| -> Result<Trajectory> {
        let stream = CrnStream::new(seed, tau as u64);
        let task = sample_task(&stream, cfg.arms(), cfg.tau_w())?;
        let run = teacher_rollout(cfg, &task, horizon, &stream, None)?;
        let labels = run.logits.iter().map(linalg::project).collect();
        Ok(Trajectory {
            task,
            history: run.history,
            logits: run.logits,
            labels,
            policies: run.policies,
        })
    })?;
    Ok(PretrainDataset {
        config: cfg.clone(),
        horizon,
        seed,
        trajectories,
    })
}

/// `F(p) = Diag(p) − p pᵀ`.
pub fn fisher_matrix(p: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_simplex(p.as_slice())?;
    Ok(DMatrix::from_diagonal(p) - p * p.transpose())
}

/// Empirical moments over all `M` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherStats {
    /// `Γ̂`, `K x K`.
    pub gamma: DMatrix<f64>,
    /// `Σ̄̂ = E[z̄ z̄ᵀ]`, `2K x 2K`.
    pub sigma: DMatrix<f64>,
    /// `Σ̂_yz̄ = E[y z̄ᵀ]`, `K x 2K`.
    pub sigma_yz: DMatrix<f64>,
    /// `Σ̂_yy = E[y yᵀ]`, `K x K`.
    pub sigma_yy: DMatrix<f64>,
    pub samples: usize,
}

impl FisherStats {
    pub fn arms(&self) -> usize {
        self.gamma.nrows()
    }

    fn zeros(k: usize) -> Self {
        Self {
            gamma: DMatrix::zeros(k, k),
            sigma: DMatrix::zeros(2 * k, 2 * k),
            sigma_yz: DMatrix::zeros(k, 2 * k),
            sigma_yy: DMatrix::zeros(k, k),
            samples: 0,
        }
    }

    fn add(&mut self, other: &Self) {
        self.gamma += &other.gamma;
        self.sigma += &other.sigma;
        self.sigma_yz += &other.sigma_yz;
        self.sigma_yy += &other.sigma_yy;
        self.samples += other.samples;
    }
}

/// Averages the four moment matrices; per-trajectory sums are combined in
/// trajectory order so the result does not depend on the execution mode.
pub fn empirical_stats(ds: &PretrainDataset, exec: Exec) -> Result<FisherStats> {
    let k = ds.arms();
    if ds.trajectories.is_empty() {
        return Err(IcpoError::InvalidConfig("empty dataset".into()));
    }
    let partials = exec.try_map(ds.trajectories.len(), |i| -> Result<FisherStats> {
        let mut acc = FisherStats::zeros(k);
        let mut failure = None;
        ds.trajectories[i].for_each_pair(|pair| {
            match fisher_matrix(pair.fisher_policy) {
                Ok(f) => acc.gamma += f,
                Err(e) => failure = Some(e),
            }
            let z = pair.features();
            acc.sigma += &z * z.transpose();
            acc.sigma_yz += pair.label * z.transpose();
            acc.sigma_yy += pair.label * pair.label.transpose();
            acc.samples += 1;
        });
        failure.map_or(Ok(acc), Err)
    })?;
    let mut total = FisherStats::zeros(k);
    for p in &partials {
        total.add(p);
    }
    let m = total.samples as f64;
    total.gamma /= m;
    total.sigma /= m;
    total.sigma_yz /= m;
    total.sigma_yy /= m;
    Ok(total)
}

/// `(1/2M) Σ ‖W̄ z̄_t − y_{t+1}‖²_Γ̂`, evaluated pair by pair from the histories.
pub fn loss_direct(
    tc: &TwoChannelParams,
    ds: &PretrainDataset,
    gamma: &DMatrix<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut failure = None;
    for traj in &ds.trajectories {
        traj.for_each_pair(|pair| match two_channel_logits(pair.prefix, tc) {
            Ok(s) => {
                let r = linalg::project(&(s - pair.label));
                total += r.dot(&(gamma * &r));
            }
            Err(e) => failure = Some(e),
        });
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(total / (2.0 * ds.pair_count() as f64))
}

/// `½ tr(Γ̂ W̄ Σ̄̂ W̄ᵀ) − tr(Γ̂ Σ̂_yz̄ W̄ᵀ) + ½ tr(Γ̂ Σ̂_yy)`.
pub fn loss_quadratic(tc: &TwoChannelParams, fs: &FisherStats) -> f64 {
    loss_quadratic_w(&tc.concat(), fs)
}

pub fn loss_quadratic_w(w: &DMatrix<f64>, fs: &FisherStats) -> f64 {
    let g = &fs.gamma;
    0.5 * (g * w * &fs.sigma * w.transpose()).trace() - (g * &fs.sigma_yz * w.transpose()).trace()
        + 0.5 * (g * &fs.sigma_yy).trace()
}

/// Full gradient `Γ̂ (W̄ Σ̄̂ − Σ̂_yz̄)`, `K x 2K`.
pub fn gradient(tc: &TwoChannelParams, fs: &FisherStats) -> DMatrix<f64> {
    gradient_w(&tc.concat(), fs)
}

pub fn gradient_w(w: &DMatrix<f64>, fs: &FisherStats) -> DMatrix<f64> {
    &fs.gamma * (w * &fs.sigma - &fs.sigma_yz)
}

/// Gradient restricted to the model subspace: `Proj · ∇ · P_S`.
pub fn projected_gradient(tc: &TwoChannelParams, fs: &FisherStats) -> DMatrix<f64> {
    restrict(&gradient(tc, fs))
}

fn restrict(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.nrows();
    linalg::project_rows(m) * linalg::channel_projector(k)
}

/// Gradient-descent options. `step = None` picks `0.9 / (‖Γ̂‖ ‖Σ̄̂‖)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GdOptions {
    pub step: Option<f64>,
    pub max_iters: usize,
    pub tol: f64,
    pub init: Option<TwoChannelParams>,
}

impl Default for GdOptions {
    fn default() -> Self {
        Self {
            step: None,
            max_iters: 100_000,
            tol: 1e-10,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdOutcome {
    pub params: TwoChannelParams,
    pub step: f64,
    /// Loss before each update, then the final loss.
    pub losses: Vec<f64>,
    /// Projected gradient Frobenius norm at each logged point.
    pub grad_norms: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Default step `0.9 / (‖Γ̂‖ ‖Σ̄̂‖)` with power-iteration norms.
pub fn default_step(fs: &FisherStats) -> Result<f64> {
    let g = linalg::power_iteration_norm(&fs.gamma, 1e-10, 10_000);
    let s = linalg::power_iteration_norm(&fs.sigma, 1e-10, 10_000);
    if !(g > 0.0 && s > 0.0) {
        return Err(IcpoError::Numeric(
            "zero moment norm; no default step".into(),
        ));
    }
    Ok(0.9 / (g * s))
}

/// Projected gradient descent on the quadratic loss, from `init` (or zero).
pub fn train_gd(fs: &FisherStats, opts: &GdOptions) -> Result<GdOutcome> {
    let step = match opts.step {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => {
            return Err(IcpoError::InvalidConfig(format!(
                "step must be > 0, got {s}"
            )))
        }
        None => default_step(fs)?,
    };
    let k = fs.arms();
    let mut w = match &opts.init {
        Some(tc) if tc.arms() == k => restrict(&tc.concat()),
        Some(tc) => {
            return Err(IcpoError::Dimension {
                expected: k,
                got: tc.arms(),
            })
        }
        None => DMatrix::zeros(k, 2 * k),
    };
    let initial = loss_quadratic_w(&w, fs);
    let mut losses = Vec::new();
    let mut grad_norms = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let loss = loss_quadratic_w(&w, fs);
        let grad = restrict(&gradient_w(&w, fs));
        let norm = grad.norm();
        losses.push(loss);
        grad_norms.push(norm);
        if !loss.is_finite() || loss > 1e3 * initial.max(f64::MIN_POSITIVE) {
            return Err(IcpoError::Diverged {
                iteration: iterations,
                loss,
            });
        }
        if norm <= opts.tol {
            converged = true;
            break;
        }
        if iterations == opts.max_iters {
            break;
        }
        w -= grad * step;
        iterations += 1;
    }
    let params = TwoChannelParams::from_concat(&w)?;
    Ok(GdOutcome {
        params,
        step,
        losses,
        grad_norms,
        iterations,
        converged,
    })
}

/// Exact minimiser on the model subspace:
/// `W̄ = Proj Σ̂_yz̄ B (Bᵀ Σ̄̂ B)⁻¹ Bᵀ` with `B` the per-channel Helmert basis.
pub fn solve_ls(fs: &FisherStats) -> Result<TwoChannelParams> {
    let k = fs.arms();
    let basis = linalg::channel_basis(k);
    let restricted = linalg::symmetrize(&(basis.transpose() * &fs.sigma * &basis));
    let eigenvalue = linalg::sym_eigenvalues(&restricted)[0];
    if !(eigenvalue > RANK_TOL) {
        return Err(IcpoError::RankDeficient { eigenvalue });
    }
    let chol = restricted
        .cholesky()
        .ok_or(IcpoError::RankDeficient { eigenvalue })?;
    let rhs = linalg::project_rows(&(&fs.sigma_yz * &basis));
    // X A = rhs  ⇔  A X ᵀ = rhsᵀ (A symmetric)
    let x = chol.solve(&rhs.transpose()).transpose();
    let w = x * basis.transpose();
    TwoChannelParams::from_concat(&linalg::project_rows(&w))
}

// ---------------------------------------------------------------------------
// Persistence

const TRAJ_MAGIC: &[u8; 4] = b"ICPT";
const TRAJ_VERSION: u32 = 1;

/// `config.json` inside a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub teacher: TeacherSettings,
    pub trajectories: usize,
    pub horizon: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

/// `manifest.json`: counts, seed and content hashes; no timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub arms: usize,
    pub trajectories: usize,
    pub horizon: usize,
    pub pairs: usize,
    pub seed: u64,
    pub config_sha256: String,
    pub files: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s<'a>(out: &mut Vec<u8>, vs: impl IntoIterator<Item = &'a f64>) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn as_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v)
        .map_err(|_| IcpoError::InvalidConfig(format!("{what} {v} does not fit in 32 bits")))
}

/// Binary trajectory record, all little-endian:
///
/// ```text
/// "ICPT" | version u32 | K u32 | N u32
/// w: K f64
/// actions: N u32 | rewards: N f64
/// logits, labels, policies: each (N+1)·K f64, one vector after another
/// ```
pub fn encode_trajectory(traj: &Trajectory) -> Result<Vec<u8>> {
    let k = traj.task.arms();
    let n = traj.horizon();
    let mut out = Vec::with_capacity(16 + 8 * (k + n + 3 * (n + 1) * k) + 4 * n);
    out.extend_from_slice(TRAJ_MAGIC);
    put_u32(&mut out, TRAJ_VERSION);
    put_u32(&mut out, as_u32(k, "arm count")?);
    put_u32(&mut out, as_u32(n, "horizon")?);
    put_f64s(&mut out, traj.task.as_slice());
    for s in traj.history.steps() {
        put_u32(&mut out, as_u32(s.action, "action")?);
    }
    put_f64s(&mut out, traj.history.steps().iter().map(|s| &s.reward));
    for block in [&traj.logits, &traj.labels, &traj.policies] {
        for v in block.iter() {
            put_f64s(&mut out, v.iter());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(IcpoError::Format {
                path: self.path.into(),
                reason: "truncated record".into(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn vector(&mut self, k: usize) -> Result<DVector<f64>> {
        let v = (0..k).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(v))
    }
}

pub fn decode_trajectory(bytes: &[u8], path: &str) -> Result<Trajectory> {
    let bad = |reason: String| IcpoError::Format {
        path: path.into(),
        reason,
    };
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != TRAJ_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32()?;
    if version != TRAJ_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let k = r.u32()? as usize;
    let n = r.u32()? as usize;
    let task = TaskVector::new(r.vector(k)?)?;
    let actions = (0..n)
        .map(|_| r.u32().map(|a| a as usize))
        .collect::<Result<Vec<_>>>()?;
    let rewards = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let steps = actions
        .into_iter()
        .zip(rewards)
        .map(|(action, reward)| HistoryStep { action, reward });
    let history = History::from_steps(k, steps)?;
    let mut block = || (0..=n).map(|_| r.vector(k)).collect::<Result<Vec<_>>>();
    let logits = block()?;
    let labels = block()?;
    let policies = block()?;
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    Ok(Trajectory {
        task,
        history,
        logits,
        labels,
        policies,
    })
}

fn dataset_config(ds: &PretrainDataset) -> DatasetConfig {
    DatasetConfig {
        teacher: ds.config.settings(),
        trajectories: ds.trajectories.len(),
        horizon: ds.horizon,
        seed: ds.seed,
    }
}

/// Writes `config.json`, `trajectories/traj_NNNNN.bin` and `manifest.json`.
pub fn save_dataset(ds: &PretrainDataset, dir: &Path) -> Result<Manifest> {
    let traj_dir = dir.join("trajectories");
    fs::create_dir_all(&traj_dir)?;
    let config = serde_json::to_string_pretty(&dataset_config(ds))? + "\n";
    fs::write(dir.join("config.json"), &config)?;
    let mut files = Vec::with_capacity(ds.trajectories.len());
    for (i, traj) in ds.trajectories.iter().enumerate() {
        let name = format!("trajectories/traj_{i:05}.bin");
        let bytes = encode_trajectory(traj)?;
        fs::write(dir.join(&name), &bytes)?;
        files.push(ManifestEntry {
            file: name,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: TRAJ_VERSION,
        arms: ds.arms(),
        trajectories: ds.trajectories.len(),
        horizon: ds.horizon,
        pairs: ds.pair_count(),
        seed: ds.seed,
        config_sha256: sha256_hex(config.as_bytes()),
        files,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// Loads a dataset directory, verifying every hash in the manifest.
pub fn load_dataset(dir: &Path) -> Result<PretrainDataset> {
    let read = |name: &str| -> Result<Vec<u8>> {
        fs::read(dir.join(name)).map_err(|e| IcpoError::Format {
            path: dir.join(name).display().to_string(),
            reason: e.to_string(),
        })
    };
    let manifest: Manifest = serde_json::from_slice(&read("manifest.json")?)?;
    let config_bytes = read("config.json")?;
    let path = |name: &str| dir.join(name).display().to_string();
    if sha256_hex(&config_bytes) != manifest.config_sha256 {
        return Err(IcpoError::Format {
            path: path("config.json"),
            reason: "hash mismatch".into(),
        });
    }
    let config: DatasetConfig = serde_json::from_slice(&config_bytes)?;
    let teacher = TeacherConfig::try_from(config.teacher)?;
    if manifest.files.len() != config.trajectories {
        return Err(IcpoError::Format {
            path: path("manifest.json"),
            reason: "file count differs from config".into(),
        });
    }
    let mut trajectories = Vec::with_capacity(manifest.files.len());
    for entry in &manifest.files {
        let bytes = read(&entry.file)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(IcpoError::Format {
                path: path(&entry.file),
                reason: "hash mismatch".into(),
            });
        }
        let traj = decode_trajectory(&bytes, &path(&entry.file))?;
        if traj.task.arms() != teacher.arms() || traj.horizon() != config.horizon {
            return Err(IcpoError::Format {
                path: path(&entry.file),
                reason: "shape differs from config".into(),
            });
        }
        trajectories.push(traj);
    }
    Ok(PretrainDataset {
        config: teacher,
        horizon: config.horizon,
        seed: config.seed,
        trajectories,
    })
}
